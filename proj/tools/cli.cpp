#include "cli.hpp"

#include "lqrppg/errors.hpp"
#include "lqrppg/eval.hpp"
#include "lqrppg/plot.hpp"
#include "lqrppg/run_config.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

namespace lqrppg::cli {
namespace {

namespace fs = std::filesystem;
using io::json;

inline constexpr int kRunFormatVersion = 1;

/// Thrown by the epoch callback of `--stop-after`; the checkpoint of that
/// epoch is already on disk.
struct StopRequested {};

std::string sha1_text(const std::string& s) { return io::git_blob_sha1(std::span<const char>(s.data(), s.size())); }

void write_text(const fs::path& path, const std::string& text) {
  io::write_bytes(path, std::span<const char>(text.data(), text.size()));
}

// ---------------------------------------------------------------------------
// Options shared by every command

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "TOML run configuration")->check(CLI::ExistingFile);
  app->add_option("--set", c.sets, "override one key, e.g. --set stage2.epochs=10 (TOML value syntax)");
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--out", c.out, "output directory (default: <run_root>/<command>-<hash>)");
  app->add_flag("--force", c.force, "replace a non-empty output directory");
}

json parse_set_value(const std::string& text) {
  try {
    const json doc = toml_to_json("v = " + text, "--set");
    return doc.at("v");
  } catch (const ConfigError&) {
    return text;
  }
}

json common_patch(const Common& c) {
  json patch = json::object();
  for (const std::string& s : c.sets) {
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    set_dotted(patch, s.substr(0, eq), parse_set_value(s.substr(eq + 1)));
  }
  if (c.seed) patch["seed"] = *c.seed;
  return patch;
}

std::vector<int> parse_int_list(const std::string& text, const std::string& flag) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(flag + ": expected comma-separated integers, got '" + text + "'");
    }
  }
  if (out.empty()) throw ConfigError(flag + ": empty list");
  return out;
}

// ---------------------------------------------------------------------------
// Run directory

std::string tree_hash_impl(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing input: " + path.string());
  if (fs::is_regular_file(path)) return io::git_blob_sha1_file(path);
  std::vector<std::string> lines;
  for (const auto& e : fs::recursive_directory_iterator(path)) {
    if (!e.is_regular_file()) continue;
    lines.push_back(fs::relative(e.path(), path).generic_string() + " " + io::git_blob_sha1_file(e.path()));
  }
  std::sort(lines.begin(), lines.end());
  std::string all;
  for (const std::string& l : lines) all += l + "\n";
  return sha1_text(all);
}

class RunDir {
 public:
  RunDir(fs::path dir, bool force, bool resume) : dir_(std::move(dir)) {
    if (fs::exists(dir_) && !fs::is_directory(dir_)) throw ConfigError("output path is a file: " + dir_.string());
    if (fs::exists(dir_) && !fs::is_empty(dir_) && !resume) {
      if (!force) throw ConfigError("output directory " + dir_.string() + " is not empty (pass --force to replace it)");
      fs::remove_all(dir_);
    }
    fs::create_directories(dir_);
  }

  const fs::path& dir() const { return dir_; }
  fs::path operator/(const std::string& name) const { return dir_ / name; }

  /// Resolved config, seeds, config hash and input hashes. A resumed run must
  /// match the stored config.
  void record(const std::string& command, const json& resolved, const RunConfig& cfg, const json& inputs,
              bool resume) const {
    const fs::path cfg_path = dir_ / "config.resolved.json";
    if (resume && fs::exists(cfg_path)) {
      if (io::read_json(cfg_path) != resolved) {
        throw ConfigError("resume: configuration differs from " + cfg_path.string());
      }
    }
    io::write_json(cfg_path, resolved);
    const SeedPlan s = cfg.seeds();
    io::write_json(dir_ / "run.json",
                   json{{"format", kRunFormatVersion},
                        {"command", command},
                        {"seed", cfg.seed},
                        {"seeds",
                         {{"data", s.data},
                          {"lqInit", s.lq_init},
                          {"lqShuffle", s.lq_shuffle},
                          {"c2fInit", s.c2f_init},
                          {"c2fShuffle", s.c2f_shuffle}}},
                        {"configSha1", sha1_text(resolved.dump())},
                        {"inputs", inputs}});
  }

  void append_log(const json& line) const {
    std::ofstream f(dir_ / "log.jsonl", std::ios::app | std::ios::binary);
    if (!f) throw DataError("cannot write " + (dir_ / "log.jsonl").string());
    f << line.dump() << "\n";
  }

  void rewrite_log(const std::vector<json>& lines) const {
    std::string text;
    for (const json& l : lines) text += l.dump() + "\n";
    write_text(dir_ / "log.jsonl", text);
  }

 private:
  fs::path dir_;
};

fs::path default_out(const Common& c, const RunConfig& cfg, const std::string& command, const json& resolved,
                     const json& inputs) {
  if (!c.out.empty()) return c.out;
  return fs::path(cfg.run_root) / (command + "-" + sha1_text(resolved.dump() + inputs.dump()).substr(0, 10));
}

struct Resolved {
  json doc;
  RunConfig cfg;
};

Resolved resolve(const Common& c, const json& patch) {
  json merged = common_patch(c);
  merged.merge_patch(patch);  // command flags win over --set
  Resolved r;
  r.doc = resolve_config(c.config, current_environment(), merged);
  r.cfg = run_config_from_json(r.doc);
  return r;
}

// ---------------------------------------------------------------------------
// Inputs

Corpus load_corpus(const std::string& dir, bool with_pixels) {
  if (dir.empty()) throw ConfigError("--corpus is required");
  Corpus c = read_corpus(dir, with_pixels);
  check_split_disjoint(c);
  return c;
}

LqModule train_lq_module(const RunConfig& cfg, const Corpus& corpus, int max_bits, std::ostream& out,
                         const RunDir* run) {
  LqModule lq = LqModule::create(max_bits, cfg.encoder, cfg.seeds().lq_init, corpus.cfg.fs);
  Stage1Cfg s1 = cfg.stage1;
  s1.bits.clear();
  train_stage1(label_samples(corpus, Split::train), lq, s1, [&](const Stage1EpochLog& e) {
    const json line{{"stage", "lq"},          {"bits", e.bits},      {"epoch", e.epoch},
                    {"total", e.loss.total},  {"time", e.loss.time}, {"freq", e.loss.freq},
                    {"feat", e.loss.feat},    {"lr", e.lr},          {"codebookUsage", e.codebook_usage}};
    if (run) run->append_log(line);
    out << "lq bits " << e.bits << " epoch " << e.epoch << " loss " << e.loss.total << "\n";
  });
  return lq;
}

/// Bank from --bank, or exported from --lq-ckpt on the train split.
PseudoLabelBank obtain_bank(const std::string& bank_dir, const std::string& lq_dir, const Corpus& corpus,
                            json& inputs) {
  if (!bank_dir.empty() && !lq_dir.empty()) throw ConfigError("pass either --bank or --lq-ckpt, not both");
  if (!bank_dir.empty()) {
    inputs["bank"] = tree_hash_impl(bank_dir);
    return read_bank(bank_dir);
  }
  if (!lq_dir.empty()) {
    inputs["lqCkpt"] = tree_hash_impl(lq_dir);
    LqModule lq = load_lq_module(lq_dir);
    return export_pseudo_labels(label_samples(corpus, Split::train), lq);
  }
  throw ConfigError("a pseudo-label bank is required: pass --bank DIR or --lq-ckpt DIR");
}

PseudoLabelBank bank_for_depth(const PseudoLabelBank& bank, int max_bits) {
  if (bank.max_bits < max_bits) {
    throw ConfigError("model depth " + std::to_string(max_bits) + " exceeds the bank depth " +
                      std::to_string(bank.max_bits));
  }
  return bank.max_bits == max_bits ? bank : truncate_bank(bank, max_bits);
}

void check_frames(const C2fCfg& model, const Corpus& corpus) {
  if (model.frames != corpus.cfg.frames) {
    throw ConfigError("stage2.model.frames (" + std::to_string(model.frames) + ") differs from the corpus clip length (" +
                      std::to_string(corpus.cfg.frames) + ")");
  }
}

json train_video_ids(const Corpus& corpus) { return corpus.video_ids(Split::train); }

// ---------------------------------------------------------------------------
// Reports

void write_metric_files(const fs::path& dir, const std::string& stem, const MetricReport& r) {
  io::write_json(dir / (stem + ".json"), to_json(r));
  write_text(dir / (stem + ".csv"), metrics_csv(r));
  write_text(dir / (stem + ".txt"), metrics_text(r));
}

void write_scatter(const fs::path& path, const MetricReport& r, const std::string& title) {
  std::vector<double> t, p;
  for (const HrPair& h : r.per_video) {
    t.push_back(h.truth);
    p.push_back(h.pred);
  }
  plot::write_svg(path, plot::scatter_svg(t, p, {title, "reference HR (bpm)", "predicted HR (bpm)"}));
}

void write_loss_plot(const fs::path& path, const std::vector<double>& total, const std::string& title) {
  plot::Series s{"total", {}, total};
  for (std::size_t i = 0; i < total.size(); ++i) s.x.push_back(static_cast<double>(i + 1));
  plot::write_svg(path, plot::line_svg({s}, {title, "epoch", "loss"}));
}

void write_fidelity_outputs(const fs::path& dir, const std::vector<FidelityRow>& rows) {
  io::write_json(dir / "fidelity.json", to_json(rows));
  write_text(dir / "fidelity.csv", fidelity_csv(rows));
  plot::Series learned{"learned codebook", {}, {}}, uniform{"uniform codes", {}, {}};
  for (const FidelityRow& r : rows) {
    learned.x.push_back(r.bits);
    learned.y.push_back(r.mae);
    uniform.x.push_back(r.bits);
    uniform.y.push_back(r.uniform_mae);
  }
  plot::write_svg(dir / "fidelity.svg",
                  plot::line_svg({learned, uniform}, {"pseudo-label HR fidelity", "bits", "HR MAE (bpm)"}));
  for (const FidelityRow& r : rows) {
    std::vector<std::string> labels;
    std::vector<double> values;
    for (Eigen::Index k = 0; k < r.utilization.size(); ++k) {
      labels.push_back(std::to_string(k));
      values.push_back(r.utilization[k]);
    }
    plot::write_svg(dir / ("utilization_" + std::to_string(r.bits) + "bit.svg"),
                    plot::bar_svg(labels, values,
                                  {"code utilization, " + std::to_string(r.bits) + "-bit", "code index", "fraction"}));
  }
}

std::vector<FidelityRow> fidelity_on(LqModule& lq, const Corpus& corpus, Split split, std::vector<int> bits) {
  bits.erase(std::remove_if(bits.begin(), bits.end(), [&](int b) { return b > lq.max_bits; }), bits.end());
  if (bits.empty()) return {};
  return fidelity_sweep(lq, label_samples(corpus, split), bits);
}

json with_meta(const MetricReport& r, const std::string& config_sha1, std::uint64_t seed) {
  json j = to_json(r);
  j["meta"]["configSha1"] = config_sha1;
  j["meta"]["seed"] = seed;
  return j;
}

// ---------------------------------------------------------------------------
// Commands

struct GenArgs {
  Common common;
  std::optional<int> videos, frames, size;
  std::optional<double> label_noise, artifact_prob, pixel_noise, pulse_gain;
  std::string hr_range;
};

int cmd_gen_data(const GenArgs& a, std::ostream& out) {
  json patch = json::object();
  if (a.videos) set_dotted(patch, "data.videos", *a.videos);
  if (a.frames) set_dotted(patch, "data.frames", *a.frames);
  if (a.size) {
    set_dotted(patch, "data.height", *a.size);
    set_dotted(patch, "data.width", *a.size);
  }
  if (a.label_noise) set_dotted(patch, "data.label_noise_std", *a.label_noise);
  if (a.artifact_prob) set_dotted(patch, "data.artifact_burst_prob", *a.artifact_prob);
  if (a.pixel_noise) set_dotted(patch, "data.pixel_noise_std", *a.pixel_noise);
  if (a.pulse_gain) set_dotted(patch, "data.pulse_gain", *a.pulse_gain);
  if (!a.hr_range.empty()) {
    std::string text = a.hr_range;
    std::replace(text.begin(), text.end(), ',', '-');
    const std::size_t dash = text.find('-', 1);
    try {
      if (dash == std::string::npos) throw std::invalid_argument(text);
      set_dotted(patch, "data.hr_range", json{std::stod(text.substr(0, dash)), std::stod(text.substr(dash + 1))});
    } catch (const std::logic_error&) {
      throw ConfigError("--hr-range expects LO-HI in bpm, got '" + a.hr_range + "'");
    }
  }
  const Resolved r = resolve(a.common, patch);
  const RunDir run(default_out(a.common, r.cfg, "gen-data", r.doc, json::object()), a.common.force, false);

  const Corpus corpus = generate_corpus(r.cfg.data);
  write_corpus(corpus, run.dir());
  run.record("gen-data", r.doc, r.cfg, json::object(), false);

  std::vector<double> snr;
  for (const ClipRecord& c : corpus.clips) snr.push_back(snr_db(PulseTrace(c.label, corpus.cfg.fs)));
  std::sort(snr.begin(), snr.end());
  double mean = 0.0;
  for (double s : snr) mean += s;
  mean /= static_cast<double>(snr.size());
  const json summary{{"videos", corpus.cfg.videos},
                     {"clips", corpus.clips.size()},
                     {"train", corpus.video_ids(Split::train).size()},
                     {"val", corpus.video_ids(Split::val).size()},
                     {"test", corpus.video_ids(Split::test).size()},
                     {"labelSnrDb", {{"mean", mean}, {"min", snr.front()}, {"median", snr[snr.size() / 2]},
                                     {"max", snr.back()}}}};
  io::write_json(run / "summary.json", summary);
  out << "corpus " << run.dir().string() << ": " << corpus.cfg.videos << " videos, " << corpus.clips.size()
      << " clips (train/val/test videos " << summary["train"] << "/" << summary["val"] << "/" << summary["test"]
      << "), label SNR mean " << mean << " dB [" << snr.front() << ", " << snr.back() << "]\n";
  return 0;
}

struct TrainLqArgs {
  Common common;
  std::string corpus;
  std::optional<int> max_bits, epochs;
  bool resume = false;
};

int cmd_train_lq(const TrainLqArgs& a, std::ostream& out) {
  json patch = json::object();
  if (a.max_bits) set_dotted(patch, "stage1.max_bits", *a.max_bits);
  if (a.epochs) set_dotted(patch, "stage1.epochs", *a.epochs);
  const Resolved r = resolve(a.common, patch);
  const Corpus corpus = load_corpus(a.corpus, false);
  const json inputs{{"corpus", tree_hash_impl(a.corpus)}};
  const RunDir run(default_out(a.common, r.cfg, "train-lq", r.doc, inputs), a.common.force, a.resume);
  run.record("train-lq", r.doc, r.cfg, inputs, a.resume);

  // Levels train independently (own shuffle stream per level), so resuming at
  // level granularity reproduces the uninterrupted run.
  const fs::path ckpt = run / "checkpoint";
  LqModule lq = LqModule::create(r.cfg.lq_max_bits, r.cfg.encoder, r.cfg.seeds().lq_init, corpus.cfg.fs);
  std::set<int> done;
  if (a.resume && fs::exists(ckpt / "progress.json")) {
    lq = load_lq_module(ckpt / "lq");
    for (int b : io::read_json(ckpt / "progress.json").at("done")) done.insert(b);
  }
  std::vector<int> levels = r.cfg.stage1.bits;
  if (levels.empty()) {
    for (int n = 1; n <= r.cfg.lq_max_bits; ++n) levels.push_back(n);
  }
  const std::vector<LabelSample> train = label_samples(corpus, Split::train);
  std::map<int, std::vector<double>> curves;
  for (int n : levels) {
    if (done.count(n)) {
      out << "lq bits " << n << " already trained, skipping\n";
      continue;
    }
    Stage1Cfg s1 = r.cfg.stage1;
    s1.bits = {n};
    train_stage1(train, lq, s1, [&](const Stage1EpochLog& e) {
      run.append_log(json{{"stage", "lq"},
                          {"bits", e.bits},
                          {"epoch", e.epoch},
                          {"total", e.loss.total},
                          {"time", e.loss.time},
                          {"freq", e.loss.freq},
                          {"feat", e.loss.feat},
                          {"lr", e.lr},
                          {"codebookUsage", e.codebook_usage}});
      curves[e.bits].push_back(e.loss.total);
      out << "lq bits " << e.bits << " epoch " << e.epoch << " loss " << e.loss.total << "\n";
    });
    done.insert(n);
    save_lq_module(lq, ckpt / "lq");
    io::write_json(ckpt / "progress.json", json{{"done", done}});
  }

  lq.provenance = json{{"corpus", inputs["corpus"]}, {"split", "train"}};
  save_lq_module(lq, run / "lq");
  const PseudoLabelBank bank = export_pseudo_labels(train, lq);
  write_bank(bank, run / "bank");

  const std::vector<FidelityRow> rows = fidelity_on(lq, corpus, Split::val, r.cfg.sweep.bits);
  if (!rows.empty()) write_fidelity_outputs(run.dir(), rows);
  std::vector<plot::Series> series;
  for (const auto& [bits, curve] : curves) {
    plot::Series s{std::to_string(bits) + "-bit", {}, curve};
    for (std::size_t i = 0; i < curve.size(); ++i) s.x.push_back(static_cast<double>(i + 1));
    series.push_back(s);
  }
  if (!series.empty()) plot::write_svg(run / "loss.svg", plot::line_svg(series, {"stage-1 loss", "epoch", "loss"}));

  json summary{{"maxBits", lq.max_bits}, {"moduleId", lq.id()}, {"bank", (run / "bank").string()}};
  for (const FidelityRow& f : rows) summary["valFidelityMae"][std::to_string(f.bits)] = f.mae;
  io::write_json(run / "summary.json", summary);
  out << "train-lq " << run.dir().string() << ": module " << lq.id().substr(0, 12) << ", bank with "
      << bank.records.size() << " records\n";
  for (const FidelityRow& f : rows) {
    out << "  val fidelity " << f.bits << "-bit: MAE " << f.mae << " bpm (uniform " << f.uniform_mae << ")\n";
  }
  return 0;
}

struct TrainC2fArgs {
  Common common;
  std::string corpus, bank, lq_ckpt, mask, supervision;
  std::optional<int> max_bits, epochs, stop_after;
  std::optional<double> lambda_ce;
  bool resume = false;
};

MetricReport evaluate_model(C2fModel& model, const Corpus& corpus, Split split) {
  return evaluate_traces(predict_videos(model, corpus, split));
}

int cmd_train_c2f(const TrainC2fArgs& a, std::ostream& out) {
  json patch = json::object();
  if (a.max_bits) set_dotted(patch, "stage2.model.max_bits", *a.max_bits);
  if (a.epochs) set_dotted(patch, "stage2.epochs", *a.epochs);
  if (!a.mask.empty()) set_dotted(patch, "stage2.mask", parse_int_list(a.mask, "--supervision-mask"));
  if (!a.supervision.empty()) set_dotted(patch, "stage2.supervision", a.supervision);
  if (a.lambda_ce) set_dotted(patch, "stage2.lambda_ce", *a.lambda_ce);
  const Resolved r = resolve(a.common, patch);
  const Corpus corpus = load_corpus(a.corpus, true);
  check_frames(r.cfg.model, corpus);
  json inputs{{"corpus", tree_hash_impl(a.corpus)}};
  const PseudoLabelBank bank = bank_for_depth(obtain_bank(a.bank, a.lq_ckpt, corpus, inputs), r.cfg.model.max_bits);
  const RunDir run(default_out(a.common, r.cfg, "train-c2f", r.doc, inputs), a.common.force, a.resume);
  run.record("train-c2f", r.doc, r.cfg, inputs, a.resume);

  C2fModel model = C2fModel::create(r.cfg.model, r.cfg.seeds().c2f_init);
  Stage2Cfg s2 = r.cfg.stage2;
  s2.checkpoint_dir = run / "checkpoint";
  s2.resume = a.resume;
  out << "train-c2f: " << c2f_param_count(model) << " parameters, " << r.cfg.model.steps()
      << " refinement steps, supervision " << to_string(s2.supervision) << "\n";

  std::vector<Stage2EpochLog> log;
  try {
    log = train_stage2(corpus, bank, model, s2, [&](const Stage2EpochLog& e) {
      run.append_log(to_json(e));
      out << "c2f epoch " << e.epoch << " loss " << e.total << " (cls " << e.cls << ", rec " << e.rec << ")\n";
      if (a.stop_after && e.epoch >= *a.stop_after) throw StopRequested{};
    });
  } catch (const StopRequested&) {
    out << "stopped after epoch " << *a.stop_after << "; continue with --resume\n";
    return 0;
  }
  std::vector<json> lines;
  std::vector<double> totals;
  for (const Stage2EpochLog& e : log) {
    lines.push_back(to_json(e));
    totals.push_back(e.total);
  }
  run.rewrite_log(lines);
  write_loss_plot(run / "loss.svg", totals, "C2F training loss");
  save_c2f(model, run / "model", json{{"trainVideos", train_video_ids(corpus)}, {"corpus", inputs["corpus"]}});

  const MetricReport val = evaluate_model(model, corpus, Split::val);
  const json summary{{"epochs", log.size()},
                     {"finalLoss", log.empty() ? json(nullptr) : json(log.back().total)},
                     {"parameters", c2f_param_count(model)},
                     {"val", {{"mae", val.mae}, {"rmse", val.rmse}, {"mape", val.mape}, {"rho", val.rho}}}};
  io::write_json(run / "summary.json", summary);
  out << "train-c2f " << run.dir().string() << ": final loss " << summary["finalLoss"] << ", val MAE " << val.mae
      << " bpm, rho " << val.rho << "\n";
  return 0;
}

struct TrainE2eArgs {
  Common common;
  std::string corpus;
  std::optional<int> max_bits, epochs;
};

int cmd_train_e2e(const TrainE2eArgs& a, std::ostream& out) {
  json patch = json::object();
  if (a.max_bits) {
    set_dotted(patch, "stage1.max_bits", *a.max_bits);
    set_dotted(patch, "stage2.model.max_bits", *a.max_bits);
  }
  if (a.epochs) set_dotted(patch, "stage2.epochs", *a.epochs);
  const Resolved r = resolve(a.common, patch);
  if (r.cfg.lq_max_bits != r.cfg.model.max_bits) {
    throw ConfigError("train-e2e needs stage1.max_bits == stage2.model.max_bits");
  }
  const Corpus corpus = load_corpus(a.corpus, true);
  check_frames(r.cfg.model, corpus);
  const json inputs{{"corpus", tree_hash_impl(a.corpus)}};
  const RunDir run(default_out(a.common, r.cfg, "train-e2e", r.doc, inputs), a.common.force, false);
  run.record("train-e2e", r.doc, r.cfg, inputs, false);

  LqModule lq = LqModule::create(r.cfg.lq_max_bits, r.cfg.encoder, r.cfg.seeds().lq_init, corpus.cfg.fs);
  C2fModel model = C2fModel::create(r.cfg.model, r.cfg.seeds().c2f_init);
  Stage2Cfg s2 = r.cfg.stage2;
  s2.checkpoint_dir = run / "checkpoint";
  const auto log = train_end_to_end(corpus, lq, model, s2, r.cfg.stage1, [&](const E2eEpochLog& e) {
    run.append_log(to_json(e));
    out << "e2e epoch " << e.epoch << " loss " << e.total << " (lq " << e.lq << ", c2f " << e.c2f << ")\n";
  });
  std::vector<double> totals;
  for (const E2eEpochLog& e : log) totals.push_back(e.total);
  write_loss_plot(run / "loss.svg", totals, "end-to-end training loss");
  save_c2f(model, run / "model", json{{"trainVideos", train_video_ids(corpus)}, {"corpus", inputs["corpus"]}});
  save_lq_module(lq, run / "lq");

  const MetricReport val = evaluate_model(model, corpus, Split::val);
  const json summary{{"epochs", log.size()},
                     {"finalLoss", log.empty() ? json(nullptr) : json(log.back().total)},
                     {"val", {{"mae", val.mae}, {"rmse", val.rmse}, {"mape", val.mape}, {"rho", val.rho}}}};
  io::write_json(run / "summary.json", summary);
  out << "train-e2e " << run.dir().string() << ": final loss " << summary["finalLoss"] << ", val MAE " << val.mae
      << " bpm\n";
  return 0;
}

struct EvalArgs {
  Common common;
  std::string corpus, run, model, split, compare, baseline;
  bool allow_train_eval = false;
  bool hrv = false;
};

/// Absolute errors by video id.
std::map<std::string, double> abs_errors(const json& report) {
  std::map<std::string, double> out;
  for (const json& v : report.at("perVideo")) {
    out[v.at("id").get<std::string>()] = std::abs(v.at("hrPred").get<double>() - v.at("hrTrue").get<double>());
  }
  return out;
}

/// Paired test with delta = AE_reference - AE_this over the shared ids.
json compare_reports(const json& self, const json& reference, const std::string& reference_name) {
  const auto a = abs_errors(self), b = abs_errors(reference);
  std::vector<double> deltas;
  for (const auto& [id, ae] : a) {
    const auto it = b.find(id);
    if (it != b.end()) deltas.push_back(it->second - ae);
  }
  if (deltas.empty()) throw DataError("--compare: no video ids in common with " + reference_name);
  json j{{"reference", reference_name}, {"delta", "AE_reference - AE_this"}};
  if (std::all_of(deltas.begin(), deltas.end(), [](double d) { return d == 0.0; })) {
    j["n"] = 0;
    j["win"] = 0;
    j["tie"] = deltas.size();
    j["loss"] = 0;
    j["medianDelta"] = 0.0;
    j["p"] = nullptr;
    j["note"] = "every paired delta is zero; p is undefined";
    return j;
  }
  j.update(to_json(wilcoxon_signed_rank(deltas)));
  return j;
}

json hrv_section(const VideoTraces& traces, double min_duration) {
  std::vector<std::string> ids;
  std::vector<HrvMetrics> pred, truth;
  json skipped = json::array();
  for (std::size_t i = 0; i < traces.videos.size(); ++i) {
    const std::string id = "video" + std::to_string(traces.videos[i]);
    const double seconds = static_cast<double>(traces.pred[i].size()) / traces.pred[i].fs();
    if (seconds < min_duration) {
      skipped.push_back({{"id", id}, {"reason", "trace shorter than the HRV minimum duration"}, {"seconds", seconds}});
      continue;
    }
    try {
      const HrvMetrics p = hrv_metrics(bandpass(traces.pred[i]));
      const HrvMetrics t = hrv_metrics(bandpass(traces.clean[i]));
      ids.push_back(id);
      pred.push_back(p);
      truth.push_back(t);
    } catch (const DataError& e) {
      skipped.push_back({{"id", id}, {"reason", e.what()}});
    }
  }
  json j{{"skipped", skipped}};
  if (ids.size() >= 2) j["report"] = to_json(hrv_report(ids, pred, truth));
  return j;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  json patch = json::object();
  if (!a.split.empty()) set_dotted(patch, "eval.split", a.split);
  if (!a.baseline.empty()) set_dotted(patch, "eval.baseline", a.baseline);
  if (a.hrv) set_dotted(patch, "eval.hrv", true);
  const Resolved r = resolve(a.common, patch);
  const Split split = r.cfg.eval.split;
  if (split == Split::train && !a.allow_train_eval) {
    throw ConfigError("evaluating on the train split requires --allow-train-eval");
  }
  if (a.run.empty() == a.model.empty()) throw ConfigError("pass exactly one of --run DIR or --model STEM");
  const fs::path model_stem = a.model.empty() ? fs::path(a.run) / "model" : fs::path(a.model);

  const Corpus corpus = load_corpus(a.corpus, true);
  json extra;
  C2fModel model = load_c2f(model_stem, &extra);
  if (split != Split::train && extra.contains("trainVideos")) {
    const std::set<int> trained(extra["trainVideos"].begin(), extra["trainVideos"].end());
    for (int v : corpus.video_ids(split)) {
      if (trained.count(v)) {
        throw DataError("split leakage: video " + std::to_string(v) + " of the " + to_string(split) +
                        " split was used for training");
      }
    }
  }
  json inputs{{"corpus", tree_hash_impl(a.corpus)}, {"model",
                {{"meta", tree_hash_impl(model_stem.string() + ".json")},
                 {"params", tree_hash_impl(model_stem.string() + ".bin")}}}};
  const fs::path default_dir =
      a.run.empty() ? fs::path() : fs::path(a.run) / ("eval-" + to_string(split));
  Common c = a.common;
  if (c.out.empty() && !default_dir.empty()) c.out = default_dir.string();
  const RunDir run(default_out(c, r.cfg, "eval", r.doc, inputs), a.common.force, false);
  run.record("eval", r.doc, r.cfg, inputs, false);
  const std::string cfg_sha1 = sha1_text(r.doc.dump());

  const VideoTraces traces = predict_videos(model, corpus, split);
  const MetricReport report = evaluate_traces(traces);
  const json report_json = with_meta(report, cfg_sha1, r.cfg.seed);
  io::write_json(run / "metrics.json", report_json);
  write_text(run / "metrics.csv", metrics_csv(report));
  write_text(run / "metrics.txt", metrics_text(report));
  write_scatter(run / "scatter.svg", report, "C2F on the " + to_string(split) + " split");
  out << metrics_text(report);

  if (!r.cfg.eval.baseline.empty()) {
    const Baseline b = baseline_from_string(r.cfg.eval.baseline);
    const MetricReport base = evaluate_traces(baseline_videos(b, corpus, split));
    const std::string stem = "baseline_" + to_string(b);
    io::write_json(run / (stem + ".json"), with_meta(base, cfg_sha1, r.cfg.seed));
    write_text(run / (stem + ".csv"), metrics_csv(base));
    write_text(run / (stem + ".txt"), metrics_text(base));
    write_scatter(run / (stem + ".svg"), base, to_string(b) + " on the " + to_string(split) + " split");
    const json cmp = compare_reports(report_json, to_json(base), to_string(b));
    io::write_json(run / ("compare_" + to_string(b) + ".json"), cmp);
    out << "baseline " << to_string(b) << ": MAE " << base.mae << " bpm, RMSE " << base.rmse << ", rho " << base.rho
        << "; paired test p = " << cmp["p"] << "\n";
  }
  if (!a.compare.empty()) {
    const json other = io::read_json(a.compare);
    const json cmp = compare_reports(report_json, other, a.compare);
    io::write_json(run / "compare.json", cmp);
    out << "compare with " << a.compare << ": win/tie/loss " << cmp["win"] << "/" << cmp["tie"] << "/" << cmp["loss"]
        << ", p = " << cmp["p"] << "\n";
  }
  if (r.cfg.eval.hrv) {
    const json hrv = hrv_section(traces, HrvConfig{}.min_duration);
    io::write_json(run / "hrv.json", hrv);
    out << "hrv: " << (hrv.contains("report") ? hrv["report"]["perVideo"].size() : 0) << " videos evaluated, "
        << hrv["skipped"].size() << " skipped\n";
  }
  return 0;
}

struct SweepArgs {
  Common common;
  std::string corpus, bank, lq_ckpt, kind;
};

void write_child(const RunDir& run, const std::string& label, const json& params, const MetricReport& m) {
  std::string name;
  for (char ch : label) {
    if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-' || ch == '_') {
      name += ch;
    } else if (ch == ',' || ch == '=') {
      name += '-';
    }
  }
  if (name.empty()) name = "row";
  const fs::path dir = run / "children" / name;
  fs::create_directories(dir);
  io::write_json(dir / "params.json", params);
  write_metric_files(dir, "metrics", m);
}

void write_sweep_table(const RunDir& run, const SweepTable& t, std::ostream& out) {
  io::write_json(run / "sweep.json", to_json(t));
  write_text(run / "sweep.csv", sweep_csv(t));
  write_text(run / "sweep.txt", sweep_text(t));
  std::vector<std::string> labels;
  std::vector<double> mae;
  for (const SweepRow& row : t.rows) {
    labels.push_back(row.label);
    mae.push_back(row.metrics.mae);
    write_child(run, row.label, row.params, row.metrics);
  }
  plot::write_svg(run / "sweep.svg", plot::bar_svg(labels, mae, {t.kind + " sweep", "setting", "test HR MAE (bpm)"}));
  out << sweep_text(t);
}

int cmd_sweep(const SweepArgs& a, std::ostream& out) {
  json patch = json::object();
  if (!a.kind.empty()) set_dotted(patch, "sweep.kind", a.kind);
  const Resolved r = resolve(a.common, patch);
  const std::string kind = r.cfg.sweep.kind;
  if (kind.empty()) throw ConfigError("sweep: --kind is required (one of bits, progressive, leave-one-bit, max-bits, "
                                      "lambda-ce, supervision)");
  const bool needs_pixels = kind != "bits";
  const Corpus corpus = load_corpus(a.corpus, needs_pixels);
  if (needs_pixels) check_frames(r.cfg.model, corpus);
  json inputs{{"corpus", tree_hash_impl(a.corpus)}};
  const Split eval_split = r.cfg.eval.split;

  if (kind == "bits") {
    std::optional<LqModule> lq;
    if (!a.lq_ckpt.empty()) {
      inputs["lqCkpt"] = tree_hash_impl(a.lq_ckpt);
      lq = load_lq_module(a.lq_ckpt);
    }
    const RunDir run(default_out(a.common, r.cfg, "sweep-bits", r.doc, inputs), a.common.force, false);
    run.record("sweep", r.doc, r.cfg, inputs, false);
    if (!lq) {
      const int depth = *std::max_element(r.cfg.sweep.bits.begin(), r.cfg.sweep.bits.end());
      lq = train_lq_module(r.cfg, corpus, depth, out, &run);
      save_lq_module(*lq, run / "lq");
    }
    const auto rows = fidelity_on(*lq, corpus, eval_split, r.cfg.sweep.bits);
    if (rows.size() != r.cfg.sweep.bits.size()) throw ConfigError("sweep.bits exceed the LQ module depth");
    write_fidelity_outputs(run.dir(), rows);
    out << fidelity_csv(rows);
    return 0;
  }

  const auto bank_or_train = [&](const RunDir& run, int depth) {
    if (!a.bank.empty() || !a.lq_ckpt.empty()) return obtain_bank(a.bank, a.lq_ckpt, corpus, inputs);
    LqModule lq = train_lq_module(r.cfg, corpus, depth, out, &run);
    save_lq_module(lq, run / "lq");
    return export_pseudo_labels(label_samples(corpus, Split::train), lq);
  };
  if (!a.bank.empty()) inputs["bank"] = tree_hash_impl(a.bank);
  if (!a.lq_ckpt.empty()) inputs["lqCkpt"] = tree_hash_impl(a.lq_ckpt);
  const RunDir run(default_out(a.common, r.cfg, "sweep-" + kind, r.doc, inputs), a.common.force, false);
  run.record("sweep", r.doc, r.cfg, inputs, false);
  Stage2Cfg train = r.cfg.stage2;
  const std::uint64_t init_seed = r.cfg.seeds().c2f_init;

  if (kind == "progressive" || kind == "leave-one-bit") {
    const int n = r.cfg.model.max_bits;
    const PseudoLabelBank bank = bank_for_depth(bank_or_train(run, n), n);
    const auto masks = kind == "progressive" ? progressive_masks(n) : leave_one_bit_masks(n);
    write_sweep_table(run, mask_sweep(kind, corpus, bank, r.cfg.model, train, masks, init_seed, eval_split), out);
    return 0;
  }
  if (kind == "max-bits") {
    const int deepest = *std::max_element(r.cfg.sweep.max_bits.begin(), r.cfg.sweep.max_bits.end());
    const PseudoLabelBank full = bank_or_train(run, deepest);
    SweepTable t{kind, {}};
    for (int m : r.cfg.sweep.max_bits) {
      C2fCfg model_cfg = r.cfg.model;
      model_cfg.max_bits = m;
      Stage2Cfg s2 = train;
      s2.loss.mask.clear();
      C2fModel model = C2fModel::create(model_cfg, init_seed);
      train_stage2(corpus, bank_for_depth(full, m), model, s2);
      t.rows.push_back({std::to_string(m) + "-bit", json{{"maxBits", m}}, evaluate_model(model, corpus, eval_split)});
      out << "max-bits " << m << ": MAE " << t.rows.back().metrics.mae << "\n";
    }
    write_sweep_table(run, t, out);
    return 0;
  }
  if (kind == "lambda-ce") {
    const PseudoLabelBank bank = bank_for_depth(bank_or_train(run, r.cfg.model.max_bits), r.cfg.model.max_bits);
    SweepTable t{kind, {}};
    plot::Series curve{"test MAE", {}, {}};
    for (double lambda : r.cfg.sweep.lambda_ce) {
      Stage2Cfg s2 = train;
      s2.loss.lambda_ce = lambda;
      C2fModel model = C2fModel::create(r.cfg.model, init_seed);
      train_stage2(corpus, bank, model, s2);
      std::ostringstream label;
      label << "lambda_ce=" << lambda;
      t.rows.push_back({label.str(), json{{"lambdaCe", lambda}}, evaluate_model(model, corpus, eval_split)});
      curve.x.push_back(lambda);
      curve.y.push_back(t.rows.back().metrics.mae);
      out << label.str() << ": MAE " << t.rows.back().metrics.mae << "\n";
    }
    write_sweep_table(run, t, out);
    plot::write_svg(run / "lambda_ce.svg", plot::line_svg({curve}, {"lambda_ce sweep", "lambda_ce", "HR MAE (bpm)"}));
    return 0;
  }
  if (kind == "supervision") {
    const PseudoLabelBank bank = bank_for_depth(bank_or_train(run, r.cfg.model.max_bits), r.cfg.model.max_bits);
    std::vector<Supervision> variants;
    for (const std::string& v : r.cfg.sweep.variants) variants.push_back(supervision_from_string(v));
    const auto rows = supervision_comparison(corpus, bank, r.cfg.model, train, variants, r.cfg.sweep.seeds, eval_split);
    io::write_json(run / "supervision.json", to_json(rows));
    write_text(run / "supervision.csv", supervision_csv(rows));
    std::vector<std::string> labels;
    std::vector<double> means;
    for (const SupervisionRow& row : rows) {
      labels.push_back(to_string(row.variant));
      means.push_back(row.mean);
    }
    plot::write_svg(run / "supervision.svg",
                    plot::bar_svg(labels, means, {"supervision settings", "setting", "mean HR MAE (bpm)"}));
    out << supervision_csv(rows);
    return 0;
  }
  throw ConfigError("unknown sweep kind '" + kind + "'");
}

}  // namespace

PseudoLabelBank truncate_bank(const PseudoLabelBank& bank, int max_bits) {
  require(max_bits >= 1 && max_bits <= bank.max_bits, "truncate_bank: depth must lie in 1..bank depth");
  PseudoLabelBank out = bank;
  out.max_bits = max_bits;
  out.codebooks.resize(max_bits);
  out.codebook_hashes.resize(std::min<std::size_t>(out.codebook_hashes.size(), max_bits));
  for (PseudoLabelRecord& rec : out.records) {
    rec.y_n.resize(max_bits);
    rec.i_n.resize(max_bits);
  }
  return out;
}

std::string tree_hash(const std::filesystem::path& path) { return tree_hash_impl(path); }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Label-quantized rPPG: data generation, two-stage training, evaluation and sweeps", "lqrppg"};
  app.require_subcommand(1);

  GenArgs gen;
  CLI::App* g = app.add_subcommand("gen-data", "generate a synthetic corpus");
  add_common(g, gen.common);
  g->add_option("--videos", gen.videos, "number of videos");
  g->add_option("--frames", gen.frames, "frames per clip");
  g->add_option("--size", gen.size, "frame height and width");
  g->add_option("--label-noise", gen.label_noise, "label noise std");
  g->add_option("--artifact-prob", gen.artifact_prob, "artifact burst probability per second");
  g->add_option("--pixel-noise", gen.pixel_noise, "pixel noise std");
  g->add_option("--pulse-gain", gen.pulse_gain, "pulse amplitude in the video");
  g->add_option("--hr-range", gen.hr_range, "HR range LO-HI in bpm");

  TrainLqArgs lq;
  CLI::App* l = app.add_subcommand("train-lq", "train the stage-1 label quantizer and export the pseudo-label bank");
  add_common(l, lq.common);
  l->add_option("--corpus", lq.corpus, "corpus directory")->required();
  l->add_option("--max-bits", lq.max_bits, "deepest bit level");
  l->add_option("--epochs", lq.epochs, "epochs per level");
  l->add_flag("--resume", lq.resume, "skip levels completed by an earlier run in --out");

  TrainC2fArgs c2f;
  CLI::App* c = app.add_subcommand("train-c2f", "train the coarse-to-fine model on a pseudo-label bank");
  add_common(c, c2f.common);
  c->add_option("--corpus", c2f.corpus, "corpus directory")->required();
  c->add_option("--bank", c2f.bank, "pseudo-label bank directory");
  c->add_option("--lq-ckpt", c2f.lq_ckpt, "LQ module directory; the bank is exported from the train split first");
  c->add_option("--supervision-mask", c2f.mask, "supervised levels, e.g. 2,3,4,5");
  c->add_option("--max-bits", c2f.max_bits, "model depth N");
  c->add_option("--supervision", c2f.supervision, "supervision setting");
  c->add_option("--epochs", c2f.epochs, "epochs");
  c->add_option("--lambda-ce", c2f.lambda_ce, "classification weight");
  c->add_option("--stop-after", c2f.stop_after, "stop cleanly after this epoch (checkpoint kept)");
  c->add_flag("--resume", c2f.resume, "continue from the checkpoint in --out");

  TrainE2eArgs e2e;
  CLI::App* e = app.add_subcommand("train-e2e", "train the quantizer and the C2F model jointly");
  add_common(e, e2e.common);
  e->add_option("--corpus", e2e.corpus, "corpus directory")->required();
  e->add_option("--max-bits", e2e.max_bits, "depth N for both stages");
  e->add_option("--epochs", e2e.epochs, "epochs");

  EvalArgs ev;
  CLI::App* v = app.add_subcommand("eval", "evaluate a trained model on a corpus split");
  add_common(v, ev.common);
  v->add_option("--corpus", ev.corpus, "corpus directory")->required();
  v->add_option("--run", ev.run, "training run directory (uses <run>/model)");
  v->add_option("--model", ev.model, "model checkpoint stem");
  v->add_option("--split", ev.split, "train, val or test");
  v->add_option("--compare", ev.compare, "metrics.json of another method for the paired signed-rank test");
  v->add_option("--baseline", ev.baseline, "green, chrom or pos reference rows");
  v->add_flag("--allow-train-eval", ev.allow_train_eval, "permit evaluation on the train split");
  v->add_flag("--hrv", ev.hrv, "HRV metrics for videos of at least 60 s");

  SweepArgs sw;
  CLI::App* s = app.add_subcommand("sweep", "run a sweep and emit its table and plot");
  add_common(s, sw.common);
  s->add_option("--kind", sw.kind, "bits, progressive, leave-one-bit, max-bits, lambda-ce or supervision");
  s->add_option("--corpus", sw.corpus, "corpus directory")->required();
  s->add_option("--bank", sw.bank, "pseudo-label bank directory");
  s->add_option("--lq-ckpt", sw.lq_ckpt, "LQ module directory");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& ex) {
    err << "lqrppg: " << ex.what() << "\n";
    return 2;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen, out);
    if (l->parsed()) return cmd_train_lq(lq, out);
    if (c->parsed()) return cmd_train_c2f(c2f, out);
    if (e->parsed()) return cmd_train_e2e(e2e, out);
    if (v->parsed()) return cmd_eval(ev, out);
    if (s->parsed()) return cmd_sweep(sw, out);
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return 2;
  } catch (const InvalidArgument& ex) {
    err << "config error: " << ex.what() << "\n";
    return 2;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << "\n";
    return 3;
  } catch (const NumericalError& ex) {
    err << "numerical failure: " << ex.what() << "\n";
    return 4;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace lqrppg::cli
