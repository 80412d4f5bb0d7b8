#include "lqrppg/stage2.hpp"

#include "lqrppg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace lqrppg {

namespace fs = std::filesystem;
using io::json;

namespace {

constexpr int kC2fFormatVersion = 1;
constexpr float kHeadGain = 0.1f;

template <class S>
ad::Mat<S> column(const Vec& v) {
  return v.cast<S>();
}

template <class S>
Vec to_vec_any(const ad::Mat<S>& m) {
  return m.template cast<double>().reshaped();
}

Vec to_vec(const ad::Mat<float>& m) { return to_vec_any(m); }

std::string step_prefix(int n) { return "step" + std::to_string(n); }

Conv2d stem_conv(const std::string& branch, int layer, const C2fCfg& c) {
  if (layer == 1) return {"stem." + branch + ".conv1", 3, c.stem_hidden1, 5, 2};
  return {"stem." + branch + ".conv2", c.stem_hidden1, c.stem_hidden2, 3, 2};
}

Conv2d stem_merge(const C2fCfg& c) { return {"stem.conv3", c.stem_hidden2, c.channels, 3, 2}; }

Conv1d est_conv(int i, const C2fCfg& c) {
  const int out = i == 4 ? 1 : c.channels;
  return {"est.conv" + std::to_string(i), c.channels, out, 3, 1, ad::Padding::same};
}

BiMamba step_mamba(int n, const C2fCfg& c) { return {step_prefix(n) + ".mamba", c.mamba}; }
Linear step_cls(int n, const C2fCfg& c) { return {step_prefix(n) + ".cls", c.channels, 1, true}; }
Linear step_proj(int n, const C2fCfg& c) { return {step_prefix(n) + ".proj", 1, c.channels, true}; }
Linear variance_linear(const C2fCfg& c) { return {"var", c.channels, 1, true}; }
PositionalEncoding positional(const C2fCfg& c) { return {"pe", c.frames, c.channels}; }

bool flat(const Vec& x) {
  const double scale = std::max(1.0, x.cwiseAbs().maxCoeff());
  return !((x.array() - x.mean()).matrix().norm() > 1e-12 * scale);
}

// Correlation is undefined when either side is constant; the term then takes
// its zero-correlation value 1 without gradient and is counted in `flat_terms`.
template <class S>
ad::Var<S> neg_or_flat(ad::Tape<S>& tape, const ad::Var<S>& pred, const Vec& target, int* flat_terms) {
  if (flat(target) || flat(to_vec_any(pred.value()))) {
    if (flat_terms) ++*flat_terms;
    return tape.constant(ad::Mat<S>::Ones(1, 1));
  }
  return ad::neg_pearson(pred, target);
}

}  // namespace

// ---------------------------------------------------------------------------

void C2fCfg::validate() const {
  require(max_bits >= 1 && max_bits <= 15, "c2f: max_bits must be in 1..15");
  require(channels >= 1 && frames >= 1, "c2f: channels and frames must be >= 1");
  require(stem_hidden1 >= 1 && stem_hidden2 >= 1, "c2f: stem widths must be >= 1");
  mamba.validate();
  require(mamba.d == channels, "c2f: the refiner's state-space width must equal the channel count");
  require(tau > 0.0, "c2f: tau must be positive");
}

json to_json(const C2fCfg& c) {
  return json{{"max_bits", c.max_bits},
              {"channels", c.channels},
              {"frames", c.frames},
              {"stem_hidden", {c.stem_hidden1, c.stem_hidden2}},
              {"mamba", {{"d", c.mamba.d}, {"s", c.mamba.s}, {"k", c.mamba.k}, {"e", c.mamba.e}, {"tied", c.mamba.tied}}},
              {"tau", c.tau},
              {"variance_head", c.variance_head}};
}

C2fCfg c2f_cfg_from_json(const json& j) {
  C2fCfg c;
  c.max_bits = j.at("max_bits").get<int>();
  c.channels = j.at("channels").get<int>();
  c.frames = j.at("frames").get<int>();
  c.stem_hidden1 = j.at("stem_hidden").at(0).get<int>();
  c.stem_hidden2 = j.at("stem_hidden").at(1).get<int>();
  const json& m = j.at("mamba");
  c.mamba = BiMambaCfg{m.at("d").get<int>(), m.at("s").get<int>(), m.at("k").get<int>(), m.at("e").get<int>(),
                       m.at("tied").get<bool>()};
  c.tau = j.at("tau").get<double>();
  c.variance_head = j.at("variance_head").get<bool>();
  return c;
}

std::string to_string(Supervision s) {
  switch (s) {
    case Supervision::c2f: return "c2f";
    case Supervision::raw: return "raw";
    case Supervision::bpf: return "bpf";
    case Supervision::quant: return "quant";
    case Supervision::quantCls: return "quantCls";
    case Supervision::bpfQuant: return "bpfQuant";
    case Supervision::bpfQuantCls: return "bpfQuantCls";
    case Supervision::huber: return "huber";
    case Supervision::movingAvg: return "movingAvg";
    case Supervision::gaussianNll: return "gaussianNll";
  }
  return "?";
}

Supervision supervision_from_string(const std::string& s) {
  for (Supervision v : {Supervision::c2f, Supervision::raw, Supervision::bpf, Supervision::quant,
                        Supervision::quantCls, Supervision::bpfQuant, Supervision::bpfQuantCls, Supervision::huber,
                        Supervision::movingAvg, Supervision::gaussianNll}) {
    if (to_string(v) == s) return v;
  }
  throw InvalidArgument("unknown supervision setting '" + s + "'");
}

bool uses_soft_output(Supervision s) {
  return s == Supervision::c2f || s == Supervision::quantCls || s == Supervision::bpfQuantCls;
}

// ---------------------------------------------------------------------------

C2fModel C2fModel::create(const C2fCfg& cfg, std::uint64_t seed) {
  cfg.validate();
  C2fModel m;
  m.cfg = cfg;
  m.seed = seed;
  Rng rng(seed);
  ParamStore<float>& p = m.params;
  for (const char* branch : {"raw", "diff"}) {
    stem_conv(branch, 1, cfg).init(p, rng);
    ChannelNorm{std::string("stem.") + branch + ".norm1", cfg.stem_hidden1}.init(p);
    stem_conv(branch, 2, cfg).init(p, rng);
    ChannelNorm{std::string("stem.") + branch + ".norm2", cfg.stem_hidden2}.init(p);
  }
  stem_merge(cfg).init(p, rng);
  positional(cfg).init(p, rng);
  for (int n = 1; n <= cfg.steps(); ++n) {
    step_mamba(n, cfg).init(p, rng);
    step_cls(n, cfg).init(p, rng);
    step_proj(n, cfg).init(p, rng);
  }
  for (int i = 1; i <= 4; ++i) est_conv(i, cfg).init(p, rng);
  if (cfg.variance_head) variance_linear(cfg).init(p, rng);
  // Small classification heads keep the initial logits near the bias, which
  // center_heads places inside the code range.
  for (int n = 1; n <= cfg.max_bits; ++n) {
    p.get(n == cfg.max_bits ? "est.conv4.w" : step_prefix(n) + ".cls.w").value *= kHeadGain;
  }
  return m;
}

void C2fModel::require_codebooks() const {
  require(static_cast<int>(codebooks.size()) == cfg.max_bits,
          "c2f: model holds " + std::to_string(codebooks.size()) + " codebooks, expected " +
              std::to_string(cfg.max_bits));
  for (int n = 1; n <= cfg.max_bits; ++n) {
    require(codebooks[n - 1].size() == (Eigen::Index{1} << n),
            "c2f: codebook " + std::to_string(n) + " has the wrong size");
  }
}

void center_heads(C2fModel& model) {
  model.require_codebooks();
  const int N = model.cfg.max_bits;
  for (int n = 1; n <= N; ++n) {
    const Vec& c = model.codebooks[n - 1];
    const std::string name = n == N ? "est.conv4.b" : step_prefix(n) + ".cls.b";
    model.params.get(name).value.setConstant(static_cast<float>(0.5 * (c.minCoeff() + c.maxCoeff())));
  }
}

std::size_t c2f_param_count(const C2fModel& model) { return param_count(model.params); }

std::size_t c2f_declared_param_count(const C2fCfg& c) {
  auto conv2d = [](std::size_t in, std::size_t out, std::size_t k) { return in * k * k * out + out; };
  auto conv1d = [](std::size_t in, std::size_t out, std::size_t k) { return in * k * out + out; };
  const std::size_t h1 = c.stem_hidden1, h2 = c.stem_hidden2, C = c.channels;
  std::size_t total = 0;
  total += 2 * (conv2d(3, h1, 5) + 2 * h1 + conv2d(h1, h2, 3) + 2 * h2);
  total += conv2d(h2, C, 3);
  total += static_cast<std::size_t>(c.frames) * C;

  const std::size_t d = c.mamba.d, E = c.mamba.inner(), N = c.mamba.s, R = c.mamba.dt_rank(), k = c.mamba.k;
  // in_x, in_z, conv (w, b), x_dt, x_B, x_C, dt (w, b), A_log, D, out.
  const std::size_t direction = 2 * d * E + (k * E + E) + E * R + 2 * E * N + (R * E + E) + E * N + E + E * d;
  const std::size_t block = (c.mamba.tied ? 1 : 2) * direction + 2 * d;
  total += static_cast<std::size_t>(c.steps()) * (block + (C + 1) + (C + C));

  total += 3 * conv1d(C, C, 3) + conv1d(C, 1, 3);
  if (c.variance_head) total += C + 1;
  return total;
}

void save_c2f(const C2fModel& model, const fs::path& stem, const json& extra) {
  std::vector<json> codebooks;
  for (const Vec& c : model.codebooks) codebooks.emplace_back(std::vector<double>(c.data(), c.data() + c.size()));
  std::vector<int> bit_depths(static_cast<std::size_t>(model.cfg.max_bits));
  std::iota(bit_depths.begin(), bit_depths.end(), 1);
  save_params(model.params, stem,
              json{{"format", kC2fFormatVersion},
                   {"stage", "c2f"},
                   {"config", to_json(model.cfg)},
                   {"seed", model.seed},
                   {"bitDepths", bit_depths},
                   {"codebooks", codebooks},
                   {"supervision", to_string(model.supervision)},
                   {"mask", model.mask},
                   {"extra", extra}});
}

C2fModel load_c2f(const fs::path& stem, json* extra) {
  json meta;
  ParamStore<float> params = load_params<float>(stem, &meta);
  C2fModel m;
  try {
    if (meta.at("stage").get<std::string>() != "c2f" || meta.at("format").get<int>() != kC2fFormatVersion) {
      throw DataError(stem.string() + ": not a C2F checkpoint of a supported version");
    }
    m = C2fModel::create(c2f_cfg_from_json(meta.at("config")), meta.at("seed").get<std::uint64_t>());
    for (const auto& c : meta.at("codebooks")) {
      const auto v = c.get<std::vector<double>>();
      m.codebooks.push_back(Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    m.supervision = supervision_from_string(meta.at("supervision").get<std::string>());
    m.mask = meta.at("mask").get<std::vector<int>>();
    if (extra) *extra = meta.at("extra");
  } catch (const json::exception& e) {
    throw DataError(stem.string() + ": malformed C2F checkpoint metadata (" + e.what() + ")");
  } catch (const InvalidArgument& e) {
    throw DataError(stem.string() + ": " + e.what());
  }
  try {
    assign_params(m.params, params);
  } catch (const InvalidArgument& e) {
    throw DataError(stem.string() + ": " + e.what());
  }
  if (m.params.size() != params.size()) throw DataError(stem.string() + ": parameter set differs from the config");
  return m;
}

// ---------------------------------------------------------------------------

StemInput make_stem_input(const ClipTensor& clip) {
  require(clip.channels == 3, "stem: expected 3 channels, got " + std::to_string(clip.channels));
  require(clip.frames >= 1 && clip.height >= 1 && clip.width >= 1, "stem: empty clip");
  StemInput in;
  in.frames = clip.frames;
  in.height = clip.height;
  in.width = clip.width;
  const Eigen::Index hw = static_cast<Eigen::Index>(clip.height) * clip.width;
  in.raw.resize(clip.frames * hw, 3);
  in.diff.setZero(clip.frames * hw, 3);
  for (int c = 0; c < 3; ++c) {
    for (int t = 0; t < clip.frames; ++t) {
      in.raw.col(c).segment(t * hw, hw) = clip.frame(c, t).cast<double>().matrix() / 255.0;
    }
    for (int t = 0; t + 1 < clip.frames; ++t) {
      in.diff.col(c).segment(t * hw, hw) = (clip.frame(c, t + 1) - clip.frame(c, t)).cast<double>().matrix() / 255.0;
    }
  }
  return in;
}

template <class S>
ad::Var<S> stem_forward(ad::Tape<S>& tape, ParamStore<S>& store, const C2fCfg& cfg, const ad::Var<S>& raw,
                        const ad::Var<S>& diff, int frames, int height, int width) {
  require(raw.cols() == 3 && diff.cols() == 3, "stem: expected 3 channels");
  const int h1 = ad::conv2d_out_size(height, 5, 2), w1 = ad::conv2d_out_size(width, 5, 2);
  const int h2 = ad::conv2d_out_size(h1, 3, 2), w2 = ad::conv2d_out_size(w1, 3, 2);
  const int h3 = ad::conv2d_out_size(h2, 3, 2), w3 = ad::conv2d_out_size(w2, 3, 2);
  auto branch = [&](const std::string& name, const ad::Var<S>& x) {
    ad::Var<S> h = stem_conv(name, 1, cfg).forward(tape, store, x, frames, height, width);
    h = ad::gelu(ChannelNorm{"stem." + name + ".norm1", cfg.stem_hidden1}.forward(tape, store, h));
    h = stem_conv(name, 2, cfg).forward(tape, store, h, frames, h1, w1);
    return ad::gelu(ChannelNorm{"stem." + name + ".norm2", cfg.stem_hidden2}.forward(tape, store, h));
  };
  const ad::Var<S> merged = ad::add(branch("raw", raw), branch("diff", diff));
  const ad::Var<S> out = stem_merge(cfg).forward(tape, store, merged, frames, h2, w2);
  return ad::spatial_mean(out, h3 * w3);
}

template <class S>
RefineOut<S> refine_forward(ad::Tape<S>& tape, ParamStore<S>& store, const C2fCfg& cfg, const ad::Var<S>& stem,
                            const std::vector<Vec>& codes, const std::vector<bool>& active) {
  require(static_cast<int>(active.size()) == cfg.steps(), "refine: one activity flag per step required");
  const int T = static_cast<int>(stem.rows());
  RefineOut<S> out;
  out.logits.resize(static_cast<std::size_t>(cfg.steps()));
  out.recon.resize(static_cast<std::size_t>(cfg.steps()));
  ad::Var<S> f = ad::add(stem, positional(cfg).forward(tape, store, T, cfg.channels));
  ad::Var<S> acc;
  for (int n = 1; n <= cfg.steps(); ++n) {
    const ad::Var<S> fp = step_mamba(n, cfg).forward(tape, store, f);
    if (active[n - 1]) {
      require(static_cast<int>(codes.size()) >= n, "refine: missing codebook for " + std::to_string(n) + " bits");
      const ad::Var<S> l = step_cls(n, cfg).forward(tape, store, fp);
      const ad::Var<S> y = ad::soft_reconstruct(l, codes[n - 1], cfg.tau);
      const ad::Var<S> proj = step_proj(n, cfg).forward(tape, store, y);
      acc = acc.tape ? ad::add(acc, proj) : proj;
      out.logits[n - 1] = l;
      out.recon[n - 1] = y;
    }
    f = acc.tape ? ad::add(fp, acc) : fp;
  }
  out.features = f;
  return out;
}

template <class S>
EstimateOut<S> estimate_forward(ad::Tape<S>& tape, ParamStore<S>& store, const C2fCfg& cfg, const ad::Var<S>& fm,
                                const Vec& codes_n) {
  ad::Var<S> h = ad::gelu(est_conv(1, cfg).forward(tape, store, fm));
  h = ad::gelu(est_conv(2, cfg).forward(tape, store, h));
  h = est_conv(3, cfg).forward(tape, store, h);
  EstimateOut<S> out;
  out.logits = est_conv(4, cfg).forward(tape, store, h);
  out.recon = ad::soft_reconstruct(out.logits, codes_n, cfg.tau);
  return out;
}

template <class S>
C2fOut<S> c2f_forward(ad::Tape<S>& tape, ParamStore<S>& store, const C2fCfg& cfg, const StemInput& input,
                      const std::vector<Vec>& codes, const std::vector<bool>& active) {
  require(static_cast<int>(codes.size()) == cfg.max_bits, "c2f: one codebook per level required");
  const ad::Var<S> raw = tape.constant(input.raw.template cast<S>());
  const ad::Var<S> diff = tape.constant(input.diff.template cast<S>());
  C2fOut<S> out;
  out.refine = refine_forward(tape, store, cfg,
                              stem_forward(tape, store, cfg, raw, diff, input.frames, input.height, input.width),
                              codes, active);
  out.est = estimate_forward(tape, store, cfg, out.refine.features, codes[cfg.max_bits - 1]);
  if (cfg.variance_head) out.log_sd = variance_linear(cfg).forward(tape, store, out.refine.features);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<int> C2fLossCfg::levels(int max_bits) const {
  std::vector<int> out = mask;
  if (out.empty()) {
    out.resize(static_cast<std::size_t>(max_bits));
    std::iota(out.begin(), out.end(), 1);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  for (int n : out) require(n >= 1 && n <= max_bits, "c2f loss: mask level " + std::to_string(n) + " outside 1..N");
  require(out.back() == max_bits, "c2f loss: the mask must contain the final level N = " + std::to_string(max_bits));
  return out;
}

std::vector<bool> C2fLossCfg::active_steps(int max_bits) const {
  std::vector<bool> active(static_cast<std::size_t>(max_bits - 1), false);
  for (int n : levels(max_bits)) {
    if (n < max_bits) active[n - 1] = true;
  }
  return active;
}

void C2fLossCfg::validate(int max_bits) const {
  require(lambda_ce >= 0.0 && lambda_time >= 0.0 && lambda_freq >= 0.0, "c2f loss: weights must be >= 0");
  require(nfft >= 0, "c2f loss: nfft must be >= 0");
  levels(max_bits);
}

C2fTargets targets_from_record(const PseudoLabelRecord& record) {
  C2fTargets t;
  t.y = record.y_n;
  for (const auto& idx : record.i_n) t.indices.emplace_back(idx.begin(), idx.end());
  return t;
}

template <class S>
ad::Var<S> c2f_cls_loss(ad::Tape<S>& tape, const C2fOut<S>& out, const C2fTargets& targets,
                        const std::vector<Vec>& codes, const C2fLossCfg& cfg, int max_bits, double tau) {
  ad::Var<S> total;
  for (int n : cfg.levels(max_bits)) {
    require(static_cast<int>(targets.indices.size()) >= n && !targets.indices[n - 1].empty(),
            "c2f cls loss: missing code indices for " + std::to_string(n) + " bits");
    const ad::Var<S>& l = n == max_bits ? out.est.logits : out.refine.logits[n - 1];
    require(l.tape != nullptr, "c2f cls loss: no head output for " + std::to_string(n) + " bits");
    const ad::Var<S> ce = ad::distance_ce(l, codes[n - 1], targets.indices[n - 1], tau);
    total = total.tape ? ad::add(total, ce) : ce;
  }
  return ad::scale(total, cfg.lambda_ce / max_bits);
}

template <class S>
ad::Var<S> c2f_rec_loss(ad::Tape<S>& tape, const C2fOut<S>& out, const C2fTargets& targets, const C2fLossCfg& cfg,
                        int max_bits, double fs, const BandConfig& band, int* flat_terms) {
  ad::Var<S> total;
  for (int n : cfg.levels(max_bits)) {
    require(static_cast<int>(targets.y.size()) >= n, "c2f rec loss: missing pseudo label for " + std::to_string(n) +
                                                         " bits");
    const ad::Var<S>& y = n == max_bits ? out.est.recon : out.refine.recon[n - 1];
    require(y.tape != nullptr, "c2f rec loss: no head output for " + std::to_string(n) + " bits");
    const Vec& target = targets.y[n - 1];
    require(target.size() == y.rows(), "c2f rec loss: length mismatch");
    require(target.size() >= 64, "c2f rec loss: need T >= 64");
    const int T = static_cast<int>(target.size());
    const BandBins bins = band_bins(T, fs, band, cfg.nfft > 0 ? cfg.nfft : fine_nfft(T));
    const ad::Var<S> term =
        ad::add(ad::scale(neg_or_flat(tape, y, target, flat_terms), cfg.lambda_time),
                ad::scale(ad::spectral_ce(y, spectral_target_bin(target, bins), bins), cfg.lambda_freq));
    total = total.tape ? ad::add(total, term) : term;
  }
  return total;
}

// ---------------------------------------------------------------------------

FinalTarget final_target(Supervision s, const PseudoLabelRecord& record, const Vec& codes_n) {
  FinalTarget t;
  switch (s) {
    case Supervision::c2f: throw InvalidArgument("final_target: the hierarchical setting has per-level targets");
    case Supervision::raw:
    case Supervision::huber:
    case Supervision::gaussianNll: t.y = zscore(record.y); break;
    case Supervision::movingAvg: t.y = moving_average(zscore(record.y), 5); break;
    case Supervision::bpf: t.y = record.y_tilde; break;
    case Supervision::quant:
    case Supervision::quantCls: {
      Assignment a = assign_codes(zscore(record.y), codes_n);
      t.y = std::move(a.quantized);
      t.indices = std::move(a.indices);
      break;
    }
    case Supervision::bpfQuant:
    case Supervision::bpfQuantCls:
      require(!record.y_n.empty(), "final_target: record has no pseudo labels");
      t.y = record.y_n.back();
      t.indices.assign(record.i_n.back().begin(), record.i_n.back().end());
      break;
  }
  return t;
}

template <class S>
ad::Var<S> alt_supervision_loss(ad::Tape<S>& tape, Supervision s, const C2fOut<S>& out, const FinalTarget& target,
                                const Vec& codes_n, const C2fLossCfg& cfg, int max_bits, double fs, double tau,
                                int* flat_terms) {
  require(s != Supervision::c2f, "alt_supervision_loss: use the hierarchical objective for c2f");
  const int T = static_cast<int>(target.y.size());
  require(T >= 64, "alt_supervision_loss: need T >= 64");
  const BandBins bins = band_bins(T, fs, kPulseBand, cfg.nfft > 0 ? cfg.nfft : fine_nfft(T));
  const ad::Var<S> pred = uses_soft_output(s) ? out.est.recon : out.est.logits;
  require(pred.rows() == T, "alt_supervision_loss: length mismatch");
  ad::Var<S> loss = ad::add(ad::scale(neg_or_flat(tape, pred, target.y, flat_terms), cfg.lambda_time),
                            ad::scale(ad::spectral_ce(pred, spectral_target_bin(target.y, bins), bins), cfg.lambda_freq));
  const ad::Mat<S> y = column<S>(target.y);
  switch (s) {
    case Supervision::quantCls:
    case Supervision::bpfQuantCls:
      require(!target.indices.empty(), "alt_supervision_loss: classification needs code indices");
      loss = ad::add(ad::scale(ad::distance_ce(out.est.logits, codes_n, target.indices, tau), cfg.lambda_ce / max_bits),
                     loss);
      break;
    case Supervision::huber: loss = ad::add(loss, ad::smooth_l1(pred, y)); break;
    case Supervision::gaussianNll:
      require(out.log_sd.tape != nullptr, "alt_supervision_loss: gaussianNll needs the variance head");
      loss = ad::add(loss, ad::gaussian_nll(pred, out.log_sd, y));
      break;
    default: break;
  }
  return loss;
}

// ---------------------------------------------------------------------------

void Stage2Cfg::validate(int max_bits) const {
  require(epochs >= 1 && batch >= 1, "stage2: epochs and batch must be >= 1");
  require(pct_start > 0.0 && pct_start < 1.0, "stage2: pct_start must be in (0, 1)");
  loss.validate(max_bits);
  require(!resume || !checkpoint_dir.empty(), "stage2: resume needs a checkpoint directory");
}

json to_json(const Stage2EpochLog& e) {
  return json{{"epoch", e.epoch}, {"lossTotal", e.total}, {"lossCls", e.cls},
              {"lossRec", e.rec},   {"lr", e.lr},           {"flatTerms", e.flat_terms}};
}

json to_json(const E2eEpochLog& e) {
  return json{{"epoch", e.epoch}, {"lossTotal", e.total}, {"lossLq", e.lq},
              {"lossC2f", e.c2f},   {"lr", e.lr},           {"flatTerms", e.flat_terms}};
}

namespace {

struct Pair {
  const ClipRecord* clip;
  const PseudoLabelRecord* record;
};

std::vector<Pair> pair_clips(const Corpus& corpus, const PseudoLabelBank& bank, int frames) {
  require(bank.fs == corpus.cfg.fs, "stage2: bank rate differs from the corpus rate");
  std::map<std::pair<int, int>, const PseudoLabelRecord*> index;
  for (const auto& r : bank.records) index[{r.video, r.index}] = &r;
  std::vector<Pair> out;
  for (const ClipRecord* c : corpus.split(Split::train)) {
    auto it = index.find({c->video, c->index});
    require(it != index.end(), "stage2: no pseudo label for video " + std::to_string(c->video) + " clip " +
                                   std::to_string(c->index));
    require(it->second->split == Split::train,
            "stage2: bank record for video " + std::to_string(c->video) + " is not from the train split");
    require(c->clip.frames == frames && it->second->y.size() == frames,
            "stage2: clip length differs from the model's T = " + std::to_string(frames));
    out.push_back({c, it->second});
  }
  require(!out.empty(), "stage2: no training clips");
  return out;
}

struct Checkpointer {
  fs::path dir;

  bool enabled() const { return !dir.empty(); }
  bool exists() const { return enabled() && fs::exists(dir / "state.json"); }

  void save(const C2fModel& model, const AdamW<float>& opt, int epoch, const json& log) const {
    fs::create_directories(dir);
    save_c2f(model, dir / "model");
    opt.save_state(dir / "optim");
    io::write_json(dir / "state.json", json{{"epoch", epoch}, {"log", log}});
  }
};

}  // namespace

std::vector<Stage2EpochLog> train_stage2(const Corpus& corpus, const PseudoLabelBank& bank, C2fModel& model,
                                         const Stage2Cfg& cfg, const Stage2Callback& on_epoch) {
  const int N = model.cfg.max_bits;
  cfg.validate(N);
  require(bank.max_bits == N, "stage2: bank depth " + std::to_string(bank.max_bits) + " differs from the model's N = " +
                                  std::to_string(N));
  const bool hierarchical = cfg.supervision == Supervision::c2f;
  require(cfg.supervision != Supervision::gaussianNll || model.cfg.variance_head,
          "stage2: gaussianNll needs a model built with the variance head");
  const std::vector<Pair> pairs = pair_clips(corpus, bank, model.cfg.frames);

  model.codebooks = bank.codebooks;
  model.require_codebooks();
  if (cfg.center_heads) center_heads(model);
  model.supervision = cfg.supervision;
  model.mask = hierarchical ? cfg.loss.levels(N) : std::vector<int>{N};
  const std::vector<bool> active =
      hierarchical ? cfg.loss.active_steps(N) : std::vector<bool>(static_cast<std::size_t>(N - 1), false);
  const Vec& codes_n = model.codebooks.back();

  std::vector<C2fTargets> targets;
  std::vector<FinalTarget> finals;
  for (const Pair& p : pairs) {
    if (hierarchical) {
      targets.push_back(targets_from_record(*p.record));
    } else {
      finals.push_back(final_target(cfg.supervision, *p.record, codes_n));
    }
  }

  const std::size_t count = pairs.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch);
  const long steps_per_epoch = static_cast<long>((count + batch - 1) / batch);
  const OneCycle sched{cfg.adam.lr, steps_per_epoch * cfg.epochs, cfg.pct_start};
  sched.validate();
  model.params.zero_grad();
  AdamW<float> opt(model.params, cfg.adam);

  const Checkpointer ckpt{cfg.checkpoint_dir};
  std::vector<Stage2EpochLog> log;
  json log_json = json::array();
  int start = 0;
  if (cfg.resume && ckpt.exists()) {
    const json state = io::read_json(ckpt.dir / "state.json");
    assign_params(model.params, load_c2f(ckpt.dir / "model").params);
    opt.load_state(ckpt.dir / "optim");
    start = state.at("epoch").get<int>();
    log_json = state.at("log");
    for (const auto& e : log_json) {
      log.push_back({e.at("epoch").get<int>(), e.at("lossTotal").get<double>(), e.at("lossCls").get<double>(),
                     e.at("lossRec").get<double>(), e.at("lr").get<double>(), e.at("flatTerms").get<int>()});
    }
  }

  const double fs = corpus.cfg.fs;
  for (int epoch = start; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    Stage2EpochLog entry;
    entry.epoch = epoch + 1;
    int batches = 0;
    for (std::size_t first = 0; first < count; first += batch) {
      const std::size_t last = std::min(count, first + batch);
      const double weight = 1.0 / static_cast<double>(last - first);
      model.params.zero_grad();
      double total = 0.0, cls = 0.0;
      for (std::size_t i = first; i < last; ++i) {
        const std::size_t k = order[i];
        ad::Tape<float> tape;
        const C2fOut<float> out =
            c2f_forward(tape, model.params, model.cfg, make_stem_input(pairs[k].clip->clip), model.codebooks, active);
        ad::Var<float> loss;
        double cls_value = 0.0;
        if (hierarchical) {
          const ad::Var<float> c = c2f_cls_loss(tape, out, targets[k], model.codebooks, cfg.loss, N, model.cfg.tau);
          const ad::Var<float> r = c2f_rec_loss(tape, out, targets[k], cfg.loss, N, fs, kPulseBand, &entry.flat_terms);
          cls_value = c.scalar();
          loss = ad::add(c, r);
        } else {
          loss = alt_supervision_loss(tape, cfg.supervision, out, finals[k], codes_n, cfg.loss, N, fs, model.cfg.tau,
                                      &entry.flat_terms);
          if (uses_soft_output(cfg.supervision)) {
            cls_value = cfg.loss.lambda_ce / N *
                        ad::distance_ce(out.est.logits, codes_n, finals[k].indices, model.cfg.tau).scalar();
          }
        }
        if (!std::isfinite(loss.scalar())) {
          throw NumericalError("stage2: non-finite loss at epoch " + std::to_string(epoch + 1) + " (video " +
                               std::to_string(pairs[k].clip->video) + ")");
        }
        tape.backward(ad::scale(loss, weight));
        total += weight * loss.scalar();
        cls += weight * cls_value;
      }
      const double lr = sched.lr(static_cast<long>(epoch) * steps_per_epoch + batches);
      opt.step(lr);
      entry.total += total;
      entry.cls += cls;
      entry.lr = lr;
      ++batches;
    }
    entry.total /= batches;
    entry.cls /= batches;
    entry.rec = entry.total - entry.cls;
    log.push_back(entry);
    log_json.push_back(to_json(entry));
    if (ckpt.enabled()) ckpt.save(model, opt, epoch + 1, log_json);
    if (on_epoch) on_epoch(entry);
  }
  return log;
}

// ---------------------------------------------------------------------------

std::vector<E2eEpochLog> train_end_to_end(const Corpus& corpus, LqModule& lq, C2fModel& model, const Stage2Cfg& cfg,
                                          const Stage1Cfg& lq_cfg,
                                          const std::function<void(const E2eEpochLog&)>& on_epoch) {
  const int N = model.cfg.max_bits;
  cfg.validate(N);
  lq_cfg.validate();
  lq.validate();
  require(cfg.supervision == Supervision::c2f, "end-to-end: only the hierarchical objective is supported");
  require(lq.max_bits == N, "end-to-end: LQ module depth differs from the model's N");
  require(lq.fs == corpus.cfg.fs, "end-to-end: LQ module rate differs from the corpus rate");

  std::vector<const ClipRecord*> clips = corpus.split(Split::train);
  require(!clips.empty(), "end-to-end: no training clips");
  std::vector<Vec> y_tilde;
  for (const ClipRecord* c : clips) {
    require(c->clip.frames == model.cfg.frames, "end-to-end: clip length differs from the model's T");
    y_tilde.push_back(lq_preprocess(PulseTrace(c->label, corpus.cfg.fs), lq.band));
  }
  const int T = model.cfg.frames;
  const BandBins lq_bins = lq_cfg.loss.bins(T, lq.fs, lq.band);

  const std::size_t count = clips.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch);
  const long steps_per_epoch = static_cast<long>((count + batch - 1) / batch);
  const OneCycle sched{cfg.adam.lr, steps_per_epoch * cfg.epochs, cfg.pct_start};
  const OneCycle lq_sched{lq_cfg.adam.lr, steps_per_epoch * cfg.epochs, lq_cfg.pct_start};
  sched.validate();
  lq_sched.validate();

  model.params.zero_grad();
  AdamW<float> opt(model.params, cfg.adam);
  std::vector<AdamW<float>> lq_opts;
  for (int n = 1; n <= N; ++n) {
    lq.encoders.at(n).zero_grad();
    lq_opts.emplace_back(lq.encoders.at(n), lq_cfg.adam);
  }
  const std::vector<bool> active = cfg.loss.active_steps(N);
  model.supervision = Supervision::c2f;
  model.mask = cfg.loss.levels(N);

  auto sync_codebooks = [&]() {
    model.codebooks.clear();
    for (int n = 1; n <= N; ++n) model.codebooks.push_back(lq.codebooks.at(n).codes);
  };

  std::vector<E2eEpochLog> log;
  bool initialized = false;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    E2eEpochLog entry;
    entry.epoch = epoch + 1;
    int batches = 0;
    for (std::size_t first = 0; first < count; first += batch) {
      const std::size_t last = std::min(count, first + batch);
      const double weight = 1.0 / static_cast<double>(last - first);

      if (!initialized) {
        for (int n = 1; n <= N; ++n) {
          Vec pooled(0);
          for (std::size_t i = first; i < last; ++i) {
            ad::Tape<float> tape;
            const Vec z = lq_encoder_forward(tape, lq.encoders.at(n), lq.encoder,
                                             tape.constant(column<float>(y_tilde[order[i]])))
                              .value()
                              .template cast<double>()
                              .reshaped();
            pooled.conservativeResize(pooled.size() + z.size());
            pooled.tail(z.size()) = z;
          }
          Codebook& cb = lq.codebooks.at(n);
          cb = Codebook::from_quantiles(n, pooled, cb.decay, cb.eps);
        }
        initialized = true;
        sync_codebooks();
        if (cfg.center_heads) center_heads(model);
      }
      sync_codebooks();

      model.params.zero_grad();
      for (int n = 1; n <= N; ++n) lq.encoders.at(n).zero_grad();
      std::vector<Vec> z_all(static_cast<std::size_t>(N));
      std::vector<Assignment> a_all(static_cast<std::size_t>(N));
      double lq_total = 0.0, c2f_total = 0.0;

      for (std::size_t i = first; i < last; ++i) {
        const std::size_t k = order[i];
        C2fTargets targets;
        for (int n = 1; n <= N; ++n) {
          ad::Tape<float> tape;
          const ad::Var<float> z = lq_encoder_forward(tape, lq.encoders.at(n), lq.encoder,
                                                      tape.constant(column<float>(y_tilde[k])));
          LqGraph<float> g = lq_loss_from_latent(tape, z, lq.codebooks.at(n).codes, y_tilde[k], lq_bins, lq_cfg.loss);
          tape.backward(ad::scale(g.total, weight));
          lq_total += weight * g.parts.total;
          targets.y.push_back(g.assignment.quantized);
          targets.indices.push_back(g.assignment.indices);
          Vec& zs = z_all[n - 1];
          zs.conservativeResize(zs.size() + g.z.size());
          zs.tail(g.z.size()) = g.z;
          auto& idx = a_all[n - 1].indices;
          idx.insert(idx.end(), g.assignment.indices.begin(), g.assignment.indices.end());
        }
        ad::Tape<float> tape;
        const C2fOut<float> out =
            c2f_forward(tape, model.params, model.cfg, make_stem_input(clips[k]->clip), model.codebooks, active);
        const ad::Var<float> loss = ad::add(c2f_cls_loss(tape, out, targets, model.codebooks, cfg.loss, N, model.cfg.tau),
                                            c2f_rec_loss(tape, out, targets, cfg.loss, N, corpus.cfg.fs, kPulseBand,
                                                         &entry.flat_terms));
        if (!std::isfinite(loss.scalar()) || !std::isfinite(lq_total)) {
          if (!cfg.checkpoint_dir.empty()) {
            fs::create_directories(cfg.checkpoint_dir);
            save_c2f(model, cfg.checkpoint_dir / "model");
            save_lq_module(lq, cfg.checkpoint_dir / "lq");
          }
          throw NumericalError("end-to-end: non-finite loss at epoch " + std::to_string(epoch + 1));
        }
        tape.backward(ad::scale(loss, weight));
        c2f_total += weight * loss.scalar();
      }
      const long step = static_cast<long>(epoch) * steps_per_epoch + batches;
      const double lr = sched.lr(step);
      opt.step(lr);
      for (int n = 1; n <= N; ++n) {
        lq_opts[n - 1].step(lq_sched.lr(step));
        ema_update(lq.codebooks.at(n), z_all[n - 1], a_all[n - 1]);
      }
      entry.lq += lq_total;
      entry.c2f += c2f_total;
      entry.lr = lr;
      ++batches;
    }
    entry.lq /= batches;
    entry.c2f /= batches;
    entry.total = entry.lq + entry.c2f;
    log.push_back(entry);
    if (!cfg.checkpoint_dir.empty()) {
      fs::create_directories(cfg.checkpoint_dir);
      sync_codebooks();
      save_c2f(model, cfg.checkpoint_dir / "model");
      save_lq_module(lq, cfg.checkpoint_dir / "lq");
    }
    if (on_epoch) on_epoch(entry);
  }
  sync_codebooks();
  return log;
}

// ---------------------------------------------------------------------------

PulseTrace c2f_predict(C2fModel& model, const ClipTensor& clip) {
  model.require_codebooks();
  require(clip.frames == model.cfg.frames, "c2f_predict: clip length differs from the model's T = " +
                                               std::to_string(model.cfg.frames));
  const int N = model.cfg.max_bits;
  std::vector<bool> active(static_cast<std::size_t>(N - 1), false);
  for (int n : model.mask) {
    if (n >= 1 && n < N) active[n - 1] = true;
  }
  ad::Tape<float> tape;
  const C2fOut<float> out = c2f_forward(tape, model.params, model.cfg, make_stem_input(clip), model.codebooks, active);
  const ad::Var<float>& y = uses_soft_output(model.supervision) ? out.est.recon : out.est.logits;
  return PulseTrace(to_vec(y.value()), clip.fs, TraceKind::estimate);
}

// ---------------------------------------------------------------------------

#define LQRPPG_STAGE2_INSTANTIATE(S)                                                                             \
  template ad::Var<S> stem_forward(ad::Tape<S>&, ParamStore<S>&, const C2fCfg&, const ad::Var<S>&,               \
                                   const ad::Var<S>&, int, int, int);                                            \
  template RefineOut<S> refine_forward(ad::Tape<S>&, ParamStore<S>&, const C2fCfg&, const ad::Var<S>&,           \
                                       const std::vector<Vec>&, const std::vector<bool>&);                       \
  template EstimateOut<S> estimate_forward(ad::Tape<S>&, ParamStore<S>&, const C2fCfg&, const ad::Var<S>&,       \
                                           const Vec&);                                                          \
  template C2fOut<S> c2f_forward(ad::Tape<S>&, ParamStore<S>&, const C2fCfg&, const StemInput&,                  \
                                 const std::vector<Vec>&, const std::vector<bool>&);                             \
  template ad::Var<S> c2f_cls_loss(ad::Tape<S>&, const C2fOut<S>&, const C2fTargets&, const std::vector<Vec>&,   \
                                   const C2fLossCfg&, int, double);                                              \
  template ad::Var<S> c2f_rec_loss(ad::Tape<S>&, const C2fOut<S>&, const C2fTargets&, const C2fLossCfg&, int,    \
                                   double, const BandConfig&, int*);                                             \
  template ad::Var<S> alt_supervision_loss(ad::Tape<S>&, Supervision, const C2fOut<S>&, const FinalTarget&,      \
                                           const Vec&, const C2fLossCfg&, int, double, double, int*);

LQRPPG_STAGE2_INSTANTIATE(float)
LQRPPG_STAGE2_INSTANTIATE(double)

#undef LQRPPG_STAGE2_INSTANTIATE

}  // namespace lqrppg
