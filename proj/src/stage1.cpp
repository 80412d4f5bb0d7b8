#include "lqrppg/stage1.hpp"

#include "lqrppg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace lqrppg {

namespace fs = std::filesystem;
using io::json;

namespace {

constexpr int kModuleFormatVersion = 1;

template <class S>
ad::Mat<S> column(const Vec& v) {
  return v.cast<S>();
}

Vec to_vec(const ad::Mat<float>& m) { return m.cast<double>().reshaped(); }

std::string level_stem(const char* what, int n) { return std::string(what) + "_" + std::to_string(n); }

Vec encode_tilde(ParamStore<float>& store, const LqEncoderCfg& cfg, const Vec& y_tilde) {
  ad::Tape<float> tape;
  return to_vec(lq_encoder_forward(tape, store, cfg, tape.constant(column<float>(y_tilde))).value());
}

std::vector<int> levels(const Stage1Cfg& cfg, const LqModule& module) {
  if (!cfg.bits.empty()) return cfg.bits;
  std::vector<int> all(static_cast<std::size_t>(module.max_bits));
  std::iota(all.begin(), all.end(), 1);
  return all;
}

}  // namespace

void LqLossCfg::validate() const {
  require(lambda_time >= 0.0 && lambda_freq >= 0.0 && lambda_feat >= 0.0, "stage1 loss: weights must be >= 0");
  require(nfft >= 0, "stage1 loss: nfft must be >= 0");
}

BandBins LqLossCfg::bins(int n, double fs, const BandConfig& band) const {
  return band_bins(n, fs, band, nfft > 0 ? nfft : fine_nfft(n));
}

void LqEncoderCfg::validate() const {
  dilated.validate();
  mamba.validate();
  require(mamba.d == 1, "stage1 encoder: the state-space block runs on one feature");
  require(dilated_perturb >= 0.0, "stage1 encoder: perturbation must be >= 0");
  require(residual_gain >= 0.0, "stage1 encoder: residual gain must be >= 0");
}

json to_json(const LqEncoderCfg& c) {
  return json{{"dilated",
               {{"layers", c.dilated.layers},
                {"kernel", c.dilated.kernel},
                {"dilations", c.dilated.dilations},
                {"hidden", c.dilated.hidden}}},
              {"mamba", {{"d", c.mamba.d}, {"s", c.mamba.s}, {"k", c.mamba.k}, {"e", c.mamba.e}, {"tied", c.mamba.tied}}},
              {"dilated_perturb", c.dilated_perturb},
              {"residual_gain", c.residual_gain}};
}

LqEncoderCfg lq_encoder_cfg_from_json(const json& j) {
  LqEncoderCfg c;
  const json& d = j.at("dilated");
  c.dilated.layers = d.at("layers").get<int>();
  c.dilated.kernel = d.at("kernel").get<int>();
  c.dilated.dilations = d.at("dilations").get<std::vector<int>>();
  c.dilated.hidden = d.at("hidden").get<int>();
  const json& m = j.at("mamba");
  c.mamba = BiMambaCfg{m.at("d").get<int>(), m.at("s").get<int>(), m.at("k").get<int>(), m.at("e").get<int>(),
                       m.at("tied").get<bool>()};
  c.dilated_perturb = j.at("dilated_perturb").get<double>();
  c.residual_gain = j.at("residual_gain").get<double>();
  return c;
}

LqModule LqModule::create(int max_bits, const LqEncoderCfg& encoder, std::uint64_t seed, double fs) {
  require(max_bits >= 1 && max_bits <= 15, "lq module: max_bits must be in 1..15");
  require(fs > 0.0, "lq module: fs must be positive");
  encoder.validate();
  LqModule m;
  m.max_bits = max_bits;
  m.fs = fs;
  m.encoder = encoder;
  for (int n = 1; n <= max_bits; ++n) {
    Rng rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(n)));
    ParamStore<float> store;
    encoder.dilated_block().init(store, rng, DilatedInit::identity, encoder.dilated_perturb);
    encoder.mamba_block().init(store, rng);
    store.get("mamba.norm.gamma").value.setConstant(static_cast<float>(encoder.residual_gain));
    m.encoders.emplace(n, std::move(store));
    m.codebooks.emplace(n, Codebook::from_codes(n, uniform_codes(n)));
  }
  return m;
}

void LqModule::validate() const {
  require(max_bits >= 1, "lq module: max_bits must be >= 1");
  band.validate(fs);
  for (int n = 1; n <= max_bits; ++n) {
    require(encoders.count(n) == 1, "lq module: missing encoder for " + std::to_string(n) + " bits");
    require(codebooks.count(n) == 1, "lq module: missing codebook for " + std::to_string(n) + " bits");
    const Codebook& cb = codebooks.at(n);
    cb.validate();
    require(cb.bits == n, "lq module: codebook " + std::to_string(n) + " has the wrong bit depth");
  }
}

std::string LqModule::id() const {
  std::vector<char> bytes;
  auto append = [&](const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  };
  for (const auto& [n, store] : encoders) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      const auto& v = store.at(i).value;
      append(v.data(), sizeof(float) * static_cast<std::size_t>(v.size()));
    }
  }
  for (const auto& [n, cb] : codebooks) append(cb.codes.data(), sizeof(double) * static_cast<std::size_t>(cb.size()));
  return io::git_blob_sha1(bytes);
}

void save_lq_module(const LqModule& module, const fs::path& dir) {
  module.validate();
  fs::create_directories(dir);
  for (int n = 1; n <= module.max_bits; ++n) {
    save_params(module.encoders.at(n), dir / level_stem("encoder", n), json{{"bits", n}});
    save_codebook(module.codebooks.at(n), dir / level_stem("codebook", n));
  }
  io::write_json(dir / "module.json", json{{"version", kModuleFormatVersion},
                                          {"max_bits", module.max_bits},
                                          {"fs", module.fs},
                                          {"band", {module.band.lo, module.band.hi}},
                                          {"encoder", to_json(module.encoder)},
                                          {"provenance", module.provenance},
                                          {"id", module.id()}});
}

LqModule load_lq_module(const fs::path& dir) {
  const fs::path path = dir / "module.json";
  const json j = io::read_json(path);
  LqModule m;
  try {
    if (j.at("version").get<int>() != kModuleFormatVersion) throw DataError(path.string() + ": unsupported version");
    m.max_bits = j.at("max_bits").get<int>();
    m.fs = j.at("fs").get<double>();
    m.band = BandConfig{j.at("band").at(0).get<double>(), j.at("band").at(1).get<double>()};
    m.encoder = lq_encoder_cfg_from_json(j.at("encoder"));
    m.provenance = j.at("provenance");
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed module description (" + e.what() + ")");
  }
  for (int n = 1; n <= m.max_bits; ++n) {
    m.encoders.emplace(n, load_params<float>(dir / level_stem("encoder", n)));
    m.codebooks.emplace(n, load_codebook(dir / level_stem("codebook", n)));
  }
  try {
    m.validate();
  } catch (const InvalidArgument& e) {
    throw DataError(dir.string() + ": " + e.what());
  }
  if (j.contains("id") && j.at("id").get<std::string>() != m.id()) {
    throw DataError(dir.string() + ": module digest mismatch (corrupt or mixed files)");
  }
  return m;
}

// ---------------------------------------------------------------------------

Vec lq_preprocess(const PulseTrace& y, const BandConfig& band) {
  const Vec yt = zscore(bandpass(y, band).samples());
  require(yt.squaredNorm() > 0.0, "stage1: degenerate (constant) label");
  return yt;
}

template <class S>
ad::Var<S> lq_encoder_forward(ad::Tape<S>& tape, ParamStore<S>& store, const LqEncoderCfg& cfg,
                              const ad::Var<S>& x) {
  return cfg.mamba_block().forward(tape, store, cfg.dilated_block().forward(tape, store, x));
}

Vec lq_encode(const PulseTrace& y, int n, LqModule& module) {
  require(module.encoders.count(n) == 1, "lq_encode: no encoder for " + std::to_string(n) + " bits");
  require(y.fs() == module.fs, "lq_encode: label rate differs from the module rate");
  return encode_tilde(module.encoders.at(n), module.encoder, lq_preprocess(y, module.band));
}

LqQuantized lq_quantize(const PulseTrace& y, int n, LqModule& module) {
  require(module.codebooks.count(n) == 1, "lq_quantize: no codebook for " + std::to_string(n) + " bits");
  require(y.fs() == module.fs, "lq_quantize: label rate differs from the module rate");
  Vec yt = lq_preprocess(y, module.band);
  Vec z = encode_tilde(module.encoders.at(n), module.encoder, yt);
  Assignment a = assign_codes(z, module.codebooks.at(n));
  PulseTrace pseudo(a.quantized, y.fs(), TraceKind::pseudo, n);
  return {std::move(pseudo), std::move(a), std::move(yt), std::move(z)};
}

template <class S>
LqGraph<S> lq_loss_from_latent(ad::Tape<S>& tape, const ad::Var<S>& z, const Vec& codes, const Vec& y_tilde,
                               const BandBins& bins, const LqLossCfg& cfg) {
  require(z.cols() == 1 && z.rows() == y_tilde.size(), "stage1 loss: latent must be T x 1 matching the label");
  require(z.rows() >= 64, "stage1 loss: need T >= 64");
  LqGraph<S> g;
  g.z = z.value().template cast<double>().reshaped();
  g.assignment = assign_codes(g.z, codes);
  const ad::Mat<S> q = g.assignment.quantized.template cast<S>();
  const ad::Var<S> yq = ad::ste(z, q);

  const bool flat = g.assignment.quantized.maxCoeff() == g.assignment.quantized.minCoeff();
  const ad::Var<S> time = flat ? tape.constant(ad::Mat<S>::Ones(1, 1)) : ad::neg_pearson(yq, y_tilde);
  const ad::Var<S> freq = ad::spectral_ce(yq, spectral_target_bin(y_tilde, bins), bins);
  const ad::Var<S> feat = ad::sq_l2_sum(z, q);

  g.total = ad::add(ad::add(ad::scale(time, cfg.lambda_time), ad::scale(freq, cfg.lambda_freq)),
                    ad::scale(feat, cfg.lambda_feat));
  g.parts.time = static_cast<double>(time.scalar());
  g.parts.freq = static_cast<double>(freq.scalar());
  g.parts.feat = static_cast<double>(feat.scalar());
  g.parts.total = static_cast<double>(g.total.scalar());
  ad::check_finite(g.total, "stage1 loss");
  return g;
}

template <class S>
LqGraph<S> lq_loss_graph(ad::Tape<S>& tape, ParamStore<S>& store, const LqEncoderCfg& enc, const Vec& y_tilde,
                         const Vec& codes, double fs, const BandConfig& band, const LqLossCfg& cfg) {
  const BandBins bins = cfg.bins(static_cast<int>(y_tilde.size()), fs, band);
  const ad::Var<S> z = lq_encoder_forward(tape, store, enc, tape.constant(column<S>(y_tilde)));
  return lq_loss_from_latent(tape, z, codes, y_tilde, bins, cfg);
}

LqLossParts lq_loss(const PulseTrace& y, int n, LqModule& module, const LqLossCfg& cfg) {
  cfg.validate();
  require(y.size() >= 64, "lq_loss: need T >= 64");
  require(module.encoders.count(n) == 1, "lq_loss: no encoder for " + std::to_string(n) + " bits");
  ad::Tape<float> tape;
  return lq_loss_graph(tape, module.encoders.at(n), module.encoder, lq_preprocess(y, module.band),
                       module.codebooks.at(n).codes, module.fs, module.band, cfg)
      .parts;
}

// ---------------------------------------------------------------------------

std::vector<LabelSample> label_samples(const Corpus& corpus, Split split) {
  std::vector<LabelSample> out;
  for (const ClipRecord* c : corpus.split(split)) {
    out.push_back({PulseTrace(c->label, corpus.cfg.fs), c->video, c->index, c->split});
  }
  return out;
}

void Stage1Cfg::validate() const {
  require(epochs >= 1 && batch >= 1, "stage1: epochs and batch must be >= 1");
  require(pct_start > 0.0 && pct_start < 1.0, "stage1: pct_start must be in (0, 1)");
  loss.validate();
}

std::vector<Stage1EpochLog> train_stage1(const std::vector<LabelSample>& train, LqModule& module,
                                         const Stage1Cfg& cfg, const Stage1Callback& on_epoch) {
  cfg.validate();
  module.validate();
  require(!train.empty(), "train_stage1: empty dataset");

  std::vector<Vec> targets;
  std::set<int> videos;
  for (const auto& s : train) {
    require(s.split == Split::train, "train_stage1: sample from the " + to_string(s.split) +
                                         " split (video " + std::to_string(s.video) + ")");
    require(s.y.fs() == module.fs, "train_stage1: label rate differs from the module rate");
    require(s.y.size() >= 64, "train_stage1: labels need T >= 64");
    targets.push_back(lq_preprocess(s.y, module.band));
    videos.insert(s.video);
  }
  std::map<Eigen::Index, BandBins> bins;
  for (const Vec& t : targets) {
    if (!bins.count(t.size())) bins.emplace(t.size(), cfg.loss.bins(static_cast<int>(t.size()), module.fs, module.band));
  }

  const std::size_t count = train.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch);
  const long steps_per_epoch = static_cast<long>((count + batch - 1) / batch);
  std::vector<Stage1EpochLog> log;

  for (int n : levels(cfg, module)) {
    require(n >= 1 && n <= module.max_bits, "train_stage1: bit level out of range");
    ParamStore<float>& store = module.encoders.at(n);
    Codebook& cb = module.codebooks.at(n);
    AdamW<float> opt(store, cfg.adam);
    const OneCycle sched{cfg.adam.lr, steps_per_epoch * cfg.epochs, cfg.pct_start};
    sched.validate();
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(n)));
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    long step = 0;
    bool initialized = false;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      Stage1EpochLog entry;
      entry.bits = n;
      entry.epoch = epoch + 1;
      Vec hits = Vec::Zero(cb.size());
      int batches = 0;

      for (std::size_t first = 0; first < count; first += batch) {
        const std::size_t last = std::min(count, first + batch);
        const double weight = 1.0 / static_cast<double>(last - first);

        if (!initialized) {
          Vec pooled(0);
          for (std::size_t i = first; i < last; ++i) {
            const Vec z = encode_tilde(store, module.encoder, targets[order[i]]);
            pooled.conservativeResize(pooled.size() + z.size());
            pooled.tail(z.size()) = z;
          }
          cb = Codebook::from_quantiles(n, pooled, cb.decay, cb.eps);
          initialized = true;
        }

        store.zero_grad();
        LqLossParts mean;
        Vec z_all(0);
        Assignment a_all;
        for (std::size_t i = first; i < last; ++i) {
          const Vec& yt = targets[order[i]];
          ad::Tape<float> tape;
          LqGraph<float> g = lq_loss_from_latent(
              tape, lq_encoder_forward(tape, store, module.encoder, tape.constant(column<float>(yt))), cb.codes, yt,
              bins.at(yt.size()), cfg.loss);
          tape.backward(ad::scale(g.total, weight));
          mean.total += weight * g.parts.total;
          mean.time += weight * g.parts.time;
          mean.freq += weight * g.parts.freq;
          mean.feat += weight * g.parts.feat;
          z_all.conservativeResize(z_all.size() + g.z.size());
          z_all.tail(g.z.size()) = g.z;
          a_all.indices.insert(a_all.indices.end(), g.assignment.indices.begin(), g.assignment.indices.end());
        }
        const double lr = sched.lr(step++);
        opt.step(lr);
        ema_update(cb, z_all, a_all);
        for (int i : a_all.indices) hits[i] += 1.0;

        entry.loss.total += mean.total;
        entry.loss.time += mean.time;
        entry.loss.freq += mean.freq;
        entry.loss.feat += mean.feat;
        entry.lr = lr;
        ++batches;
      }
      entry.loss.total /= batches;
      entry.loss.time /= batches;
      entry.loss.freq /= batches;
      entry.loss.feat /= batches;
      entry.codebook_usage = static_cast<double>((hits.array() > 0.0).count()) / cb.size();
      if (!std::isfinite(entry.loss.total)) {
        throw NumericalError("train_stage1: non-finite loss at " + std::to_string(n) + " bits, epoch " +
                             std::to_string(entry.epoch));
      }
      log.push_back(entry);
      if (on_epoch) on_epoch(entry);
    }
  }

  module.provenance = json{{"split", "train"},
                           {"videos", std::vector<int>(videos.begin(), videos.end())},
                           {"samples", count},
                           {"fs", module.fs},
                           {"epochs", cfg.epochs},
                           {"seed", cfg.seed}};
  return log;
}

// ---------------------------------------------------------------------------

const PseudoLabelRecord& PseudoLabelBank::find(int video, int index) const {
  for (const auto& r : records) {
    if (r.video == video && r.index == index) return r;
  }
  throw InvalidArgument("pseudo-label bank: no record for video " + std::to_string(video) + " clip " +
                        std::to_string(index));
}

PseudoLabelBank export_pseudo_labels(const std::vector<LabelSample>& items, LqModule& module, const ExportCfg& cfg) {
  module.validate();
  PseudoLabelBank bank;
  bank.max_bits = module.max_bits;
  bank.fs = module.fs;
  bank.module_id = module.id();
  bank.provenance = module.provenance;
  for (int n = 1; n <= module.max_bits; ++n) {
    const Codebook& cb = module.codebooks.at(n);
    bank.codebook_hashes.push_back(codebook_hash(cb));
    // Stored labels are float32; codes are rounded once so codes[i] == y_n holds on disk too.
    bank.codebooks.push_back(cb.codes.cast<float>().cast<double>());
  }

  for (const auto& item : items) {
    Vec y = item.y.samples();
    if (item.y.fs() != module.fs) {
      require(cfg.resample, "export_pseudo_labels: label rate " + std::to_string(item.y.fs()) +
                                " Hz differs from the module rate (enable resampling)");
      y = resample_linear(y, item.y.fs(), module.fs);
    }
    PseudoLabelRecord rec;
    rec.video = item.video;
    rec.index = item.index;
    rec.split = item.split;
    rec.y = y.cast<float>().cast<double>();
    rec.y_tilde = lq_preprocess(PulseTrace(y, module.fs), module.band);
    for (int n = 1; n <= module.max_bits; ++n) {
      const Vec z = encode_tilde(module.encoders.at(n), module.encoder, rec.y_tilde);
      const Assignment a = assign_codes(z, module.codebooks.at(n));
      Vec yn(z.size());
      std::vector<std::int16_t> idx(a.indices.size());
      for (std::size_t t = 0; t < idx.size(); ++t) {
        idx[t] = static_cast<std::int16_t>(a.indices[t]);
        yn[static_cast<Eigen::Index>(t)] = bank.codebooks[n - 1][a.indices[t]];
      }
      rec.y_n.push_back(std::move(yn));
      rec.i_n.push_back(std::move(idx));
    }
    rec.y_tilde = rec.y_tilde.cast<float>().cast<double>();
    bank.records.push_back(std::move(rec));
  }
  return bank;
}

namespace {

std::vector<float> f32(const Vec& x) {
  std::vector<float> out(static_cast<std::size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(x[i]);
  return out;
}

Vec from_f32(const std::vector<float>& x) {
  return Eigen::Map<const Eigen::VectorXf>(x.data(), static_cast<Eigen::Index>(x.size())).cast<double>();
}

std::string record_stem(const PseudoLabelRecord& r) {
  return "v" + std::to_string(r.video) + "_c" + std::to_string(r.index);
}

}  // namespace

void write_bank(const PseudoLabelBank& bank, const fs::path& dir) {
  require(bank.max_bits >= 1, "write_bank: empty bank");
  std::vector<json> codebooks;
  for (const Vec& c : bank.codebooks) codebooks.emplace_back(std::vector<double>(c.data(), c.data() + c.size()));
  for (Split s : {Split::train, Split::val, Split::test}) {
    json records = json::array();
    const fs::path sub = dir / to_string(s);
    for (const auto& r : bank.records) {
      if (r.split != s) continue;
      fs::create_directories(sub);
      const std::string stem = record_stem(r);
      io::write_f32(sub / (stem + ".y.f32"), f32(r.y));
      io::write_f32(sub / (stem + ".ytilde.f32"), f32(r.y_tilde));
      for (int n = 1; n <= bank.max_bits; ++n) {
        io::write_f32(sub / (stem + ".y" + std::to_string(n) + ".f32"), f32(r.y_n[n - 1]));
        io::write_i16(sub / (stem + ".i" + std::to_string(n) + ".i16"), r.i_n[n - 1]);
      }
      records.push_back({{"video", r.video}, {"index", r.index}, {"stem", stem}, {"frames", r.y.size()}});
    }
    if (records.empty()) continue;
    io::write_json(sub / "manifest.json", json{{"version", kBankFormatVersion},
                                               {"split", to_string(s)},
                                               {"fs", bank.fs},
                                               {"max_bits", bank.max_bits},
                                               {"codebook_hashes", bank.codebook_hashes},
                                               {"codebooks", codebooks},
                                               {"module_id", bank.module_id},
                                               {"provenance", bank.provenance},
                                               {"records", records}});
  }
}

PseudoLabelBank read_bank(const fs::path& dir) {
  PseudoLabelBank bank;
  bool any = false;
  for (Split s : {Split::train, Split::val, Split::test}) {
    const fs::path sub = dir / to_string(s);
    const fs::path path = sub / "manifest.json";
    if (!fs::exists(path)) continue;
    const json m = io::read_json(path);
    try {
      if (m.at("version").get<int>() != kBankFormatVersion) {
        throw DataError(path.string() + ": bank version " + std::to_string(m.at("version").get<int>()) +
                        ", expected " + std::to_string(kBankFormatVersion));
      }
      const int max_bits = m.at("max_bits").get<int>();
      const auto hashes = m.at("codebook_hashes").get<std::vector<std::string>>();
      if (any && (max_bits != bank.max_bits || hashes != bank.codebook_hashes)) {
        throw DataError(path.string() + ": split was exported by a different module");
      }
      if (!any) {
        bank.max_bits = max_bits;
        bank.fs = m.at("fs").get<double>();
        bank.codebook_hashes = hashes;
        bank.module_id = m.at("module_id").get<std::string>();
        bank.provenance = m.at("provenance");
        for (const auto& c : m.at("codebooks")) {
          const auto v = c.get<std::vector<double>>();
          bank.codebooks.push_back(Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())));
        }
        any = true;
      }
      for (const auto& e : m.at("records")) {
        PseudoLabelRecord r;
        r.video = e.at("video").get<int>();
        r.index = e.at("index").get<int>();
        r.split = s;
        const std::string stem = e.at("stem").get<std::string>();
        const auto T = e.at("frames").get<std::size_t>();
        r.y = from_f32(io::read_f32(sub / (stem + ".y.f32"), T));
        r.y_tilde = from_f32(io::read_f32(sub / (stem + ".ytilde.f32"), T));
        for (int n = 1; n <= bank.max_bits; ++n) {
          r.y_n.push_back(from_f32(io::read_f32(sub / (stem + ".y" + std::to_string(n) + ".f32"), T)));
          r.i_n.push_back(io::read_i16(sub / (stem + ".i" + std::to_string(n) + ".i16"), T));
          const Vec& codes = bank.codebooks.at(static_cast<std::size_t>(n - 1));
          for (std::size_t t = 0; t < T; ++t) {
            const int k = r.i_n.back()[t];
            if (k < 0 || k >= codes.size() || codes[k] != r.y_n.back()[static_cast<Eigen::Index>(t)]) {
              throw DataError((sub / stem).string() + ": pseudo label disagrees with its code indices");
            }
          }
        }
        bank.records.push_back(std::move(r));
      }
    } catch (const json::exception& e) {
      throw DataError(path.string() + ": malformed bank manifest (" + e.what() + ")");
    }
  }
  if (!any) throw DataError(dir.string() + ": no pseudo-label bank found");
  return bank;
}

#define LQRPPG_STAGE1_INSTANTIATE(S)                                                                             \
  template ad::Var<S> lq_encoder_forward(ad::Tape<S>&, ParamStore<S>&, const LqEncoderCfg&, const ad::Var<S>&);  \
  template LqGraph<S> lq_loss_from_latent(ad::Tape<S>&, const ad::Var<S>&, const Vec&, const Vec&,               \
                                          const BandBins&, const LqLossCfg&);                                    \
  template LqGraph<S> lq_loss_graph(ad::Tape<S>&, ParamStore<S>&, const LqEncoderCfg&, const Vec&, const Vec&,   \
                                    double, const BandConfig&, const LqLossCfg&);

LQRPPG_STAGE1_INSTANTIATE(float)
LQRPPG_STAGE1_INSTANTIATE(double)

#undef LQRPPG_STAGE1_INSTANTIATE

}  // namespace lqrppg
