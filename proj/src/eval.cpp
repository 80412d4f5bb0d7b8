#include "lqrppg/eval.hpp"

#include "lqrppg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace lqrppg {

using io::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double pearson_or_nan(const Vec& a, const Vec& b) {
  try {
    return pearson(a, b);
  } catch (const InvalidArgument&) {
    return kNaN;
  }
}

double population_std(const Vec& x) { return std::sqrt((x.array() - x.mean()).square().mean()); }

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string fmt(double v, int precision = 4) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string mask_label(const std::vector<int>& mask) {
  std::string s = "{";
  for (std::size_t i = 0; i < mask.size(); ++i) s += (i ? "," : "") + std::to_string(mask[i]);
  return s + "}";
}

Vec concat(const std::vector<const Vec*>& parts) {
  Eigen::Index n = 0;
  for (const Vec* p : parts) n += p->size();
  Vec out(n);
  Eigen::Index at = 0;
  for (const Vec* p : parts) {
    out.segment(at, p->size()) = *p;
    at += p->size();
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

StandardErrors standard_errors(const std::vector<HrPair>& pairs) {
  require(pairs.size() >= 2, "standard_errors: need at least 2 pairs");
  const auto n = static_cast<Eigen::Index>(pairs.size());
  Vec d(n), p(n), t(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    p[i] = pairs[i].pred;
    t[i] = pairs[i].truth;
    d[i] = p[i] - t[i];
  }
  const double sqrt_n = std::sqrt(static_cast<double>(n));
  StandardErrors se;
  se.se_mae = population_std(d.cwiseAbs()) / sqrt_n;
  const Vec d2 = d.array().square();
  const double rmse = std::sqrt(d2.mean());
  se.se_rmse = rmse > 0.0 ? population_std(d2) / (2.0 * rmse * sqrt_n) : 0.0;
  const double rho = pearson_or_nan(p, t);
  se.se_rho = n >= 3 && std::isfinite(rho) ? std::sqrt((1.0 - rho * rho) / static_cast<double>(n - 2)) : kNaN;
  return se;
}

MetricReport hr_metrics(const std::vector<HrPair>& pairs) {
  require(pairs.size() >= 2, "hr_metrics: need at least 2 pairs");
  const auto n = static_cast<Eigen::Index>(pairs.size());
  Vec p(n), t(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    require(pairs[i].truth > 0.0, "hr_metrics: true HR must be positive (pair '" + pairs[i].id + "')");
    require(std::isfinite(pairs[i].pred), "hr_metrics: non-finite prediction (pair '" + pairs[i].id + "')");
    p[i] = pairs[i].pred;
    t[i] = pairs[i].truth;
  }
  const Vec d = p - t;
  MetricReport r;
  r.per_video = pairs;
  r.mae = d.cwiseAbs().mean();
  r.rmse = std::sqrt(d.squaredNorm() / static_cast<double>(n));
  r.mape = (d.cwiseAbs().array() / t.array()).mean() * 100.0;
  r.rho = pearson_or_nan(p, t);
  r.se = standard_errors(pairs);
  return r;
}

json to_json(const MetricReport& r) {
  json per = json::array();
  for (const HrPair& x : r.per_video) per.push_back({{"id", x.id}, {"hrPred", x.pred}, {"hrTrue", x.truth}});
  return json{{"perVideo", per},
              {"mae", r.mae},
              {"rmse", r.rmse},
              {"mape", r.mape},
              {"rho", number_or_null(r.rho)},
              {"se",
               {{"seMae", r.se.se_mae}, {"seRmse", r.se.se_rmse}, {"seRho", number_or_null(r.se.se_rho)}}},
              {"meta", r.meta}};
}

std::string metrics_csv(const MetricReport& r) {
  std::ostringstream os;
  os << "id,hr_pred,hr_true,abs_error\n";
  for (const HrPair& x : r.per_video) {
    os << x.id << ',' << fmt(x.pred) << ',' << fmt(x.truth) << ',' << fmt(std::abs(x.pred - x.truth)) << '\n';
  }
  return os.str();
}

std::string metrics_text(const MetricReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(8) << "MAE" << std::setw(8) << "RMSE" << std::setw(8) << "MAPE" << std::setw(8)
     << "rho" << std::setw(8) << "seMAE" << std::setw(8) << "seRMSE" << "seRho\n";
  os << std::setw(8) << fmt(r.mae, 3) << std::setw(8) << fmt(r.rmse, 3) << std::setw(8) << fmt(r.mape, 3)
     << std::setw(8) << fmt(r.rho, 3) << std::setw(8) << fmt(r.se.se_mae, 3) << std::setw(8) << fmt(r.se.se_rmse, 3)
     << fmt(r.se.se_rho, 3) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------

double wilcoxon_exact_p(const std::vector<double>& ranks, double w_plus) {
  require(!ranks.empty(), "wilcoxon: no ranks");
  // Mean ranks are multiples of 1/2, so doubled ranks are integers.
  std::vector<int> r2;
  int total = 0;
  for (double r : ranks) {
    r2.push_back(static_cast<int>(std::lround(2.0 * r)));
    total += r2.back();
  }
  std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
  count[0] = 1.0;
  int reach = 0;
  for (int r : r2) {
    for (int s = reach; s >= 0; --s) count[s + r] += count[s];
    reach += r;
  }
  const double mid = 0.5 * total;
  const double dev = std::abs(2.0 * w_plus - mid);
  double extreme = 0.0, all = 0.0;
  for (int s = 0; s <= total; ++s) {
    all += count[s];
    if (std::abs(s - mid) >= dev - 1e-9) extreme += count[s];
  }
  return std::min(1.0, extreme / all);
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& deltas) {
  require(!deltas.empty(), "wilcoxon: no deltas");
  WilcoxonResult w;
  std::vector<double> nz;
  for (double d : deltas) {
    require(std::isfinite(d), "wilcoxon: non-finite delta");
    if (d > 0.0) ++w.win;
    if (d < 0.0) ++w.loss;
    if (d == 0.0) {
      ++w.tie;
    } else {
      nz.push_back(d);
    }
  }
  if (nz.empty()) throw InvalidArgument("wilcoxon: all deltas are zero, p is undefined");
  std::vector<double> sorted = deltas;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  w.median_delta = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);

  const int n = static_cast<int>(nz.size());
  w.n = n;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return std::abs(nz[a]) < std::abs(nz[b]); });
  std::vector<double> ranks(static_cast<std::size_t>(n));
  double tie_term = 0.0;
  for (int i = 0; i < n;) {
    int j = i;
    while (j + 1 < n && std::abs(nz[order[j + 1]]) == std::abs(nz[order[i]])) ++j;
    const double mean_rank = 0.5 * (i + j) + 1.0;
    for (int k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    const double t = j - i + 1;
    tie_term += t * t * t - t;
    i = j + 1;
  }
  for (int i = 0; i < n; ++i) {
    if (nz[i] > 0.0) w.w_plus += ranks[i];
  }
  if (n <= kWilcoxonExactMax) {
    w.exact = true;
    w.p = wilcoxon_exact_p(ranks, w.w_plus);
  } else {
    w.exact = false;
    const double dn = n;
    const double mu = dn * (dn + 1.0) / 4.0;
    const double var = dn * (dn + 1.0) * (2.0 * dn + 1.0) / 24.0 - tie_term / 48.0;
    w.p = var > 0.0 ? std::erfc(std::abs(w.w_plus - mu) / std::sqrt(var) / std::sqrt(2.0)) : 1.0;
  }
  return w;
}

json to_json(const WilcoxonResult& w) {
  return json{{"N", w.n},        {"win", w.win},         {"tie", w.tie}, {"loss", w.loss},
              {"medianDelta", w.median_delta}, {"wPlus", w.w_plus}, {"p", w.p}, {"exact", w.exact}};
}

// ---------------------------------------------------------------------------

std::vector<int> detect_peaks(const Vec& x, double fs, const HrvConfig& cfg) {
  const Eigen::Index n = x.size();
  const double min_prominence = cfg.prominence * population_std(x);
  std::vector<int> candidates;
  for (Eigen::Index i = 1; i + 1 < n; ++i) {
    if (!(x[i] > x[i - 1] && x[i] >= x[i + 1])) continue;
    double left = x[i], right = x[i];
    for (Eigen::Index j = i - 1; j >= 0 && x[j] <= x[i]; --j) left = std::min(left, x[j]);
    for (Eigen::Index j = i + 1; j < n && x[j] <= x[i]; ++j) right = std::min(right, x[j]);
    if (x[i] - std::max(left, right) >= min_prominence) candidates.push_back(static_cast<int>(i));
  }
  std::vector<int> by_height = candidates;
  std::stable_sort(by_height.begin(), by_height.end(), [&](int a, int b) { return x[a] > x[b]; });
  const double distance = cfg.min_separation * fs;
  std::vector<int> kept;
  for (int c : by_height) {
    const bool clear = std::none_of(kept.begin(), kept.end(), [&](int k) { return std::abs(k - c) < distance; });
    if (clear) kept.push_back(c);
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

Vec cubic_spline(const Vec& t, const Vec& y, const Vec& at) {
  const Eigen::Index n = t.size();
  require(n >= 2 && y.size() == n, "cubic_spline: need at least 2 knots with matching values");
  for (Eigen::Index i = 1; i < n; ++i) require(t[i] > t[i - 1], "cubic_spline: knots must increase strictly");
  // Second derivatives m with m[0] = m[n-1] = 0, tridiagonal solve (Thomas).
  Vec m = Vec::Zero(n);
  if (n > 2) {
    const Eigen::Index k = n - 2;
    Vec diag(k), upper(k), rhs(k);
    for (Eigen::Index i = 1; i <= k; ++i) {
      const double h0 = t[i] - t[i - 1], h1 = t[i + 1] - t[i];
      diag[i - 1] = 2.0 * (h0 + h1);
      upper[i - 1] = h1;
      rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
    }
    for (Eigen::Index i = 1; i < k; ++i) {
      const double lower = t[i + 1] - t[i];
      const double f = lower / diag[i - 1];
      diag[i] -= f * upper[i - 1];
      rhs[i] -= f * rhs[i - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for (Eigen::Index i = k - 1; i >= 1; --i) m[i] = (rhs[i - 1] - upper[i - 1] * m[i + 1]) / diag[i - 1];
  }
  Vec out(at.size());
  Eigen::Index seg = 0;
  for (Eigen::Index j = 0; j < at.size(); ++j) {
    const double x = std::clamp(at[j], t[0], t[n - 1]);
    while (seg + 2 < n && x > t[seg + 1]) ++seg;
    while (seg > 0 && x < t[seg]) --seg;
    const double h = t[seg + 1] - t[seg];
    const double a = (t[seg + 1] - x) / h, b = (x - t[seg]) / h;
    out[j] = a * y[seg] + b * y[seg + 1] + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * h * h / 6.0;
  }
  return out;
}

HrvMetrics hrv_metrics(const PulseTrace& trace, const HrvConfig& cfg) {
  const double fs = trace.fs();
  const double duration = static_cast<double>(trace.size()) / fs;
  require(duration >= cfg.min_duration - 1e-9, "hrv_metrics: need at least " + fmt(cfg.min_duration, 0) +
                                                   " s of signal, got " + fmt(duration, 1) + " s");
  const Vec x = zscore(trace.samples());
  const std::vector<int> peaks = detect_peaks(x, fs, cfg);
  HrvMetrics h;
  h.beats = static_cast<int>(peaks.size());
  if (h.beats < cfg.min_beats) {
    throw DataError("hrv_metrics: " + std::to_string(h.beats) + " beats detected, need " +
                    std::to_string(cfg.min_beats));
  }
  Vec beat_t(h.beats);
  for (int k = 0; k < h.beats; ++k) {
    const int i = peaks[k];
    double delta = 0.0;
    if (i > 0 && i + 1 < x.size()) {
      const double den = x[i - 1] - 2.0 * x[i] + x[i + 1];
      if (den < 0.0) delta = std::clamp(0.5 * (x[i - 1] - x[i + 1]) / den, -0.5, 0.5);
    }
    beat_t[k] = (i + delta) / fs;
  }
  const Vec ibi_t = beat_t.tail(h.beats - 1);
  const Vec ibi = beat_t.tail(h.beats - 1) - beat_t.head(h.beats - 1);

  const double step = 1.0 / cfg.tachogram_fs;
  const auto samples = static_cast<Eigen::Index>(std::floor((ibi_t[ibi_t.size() - 1] - ibi_t[0]) / step)) + 1;
  require(samples >= 8, "hrv_metrics: beat series too short for a spectrum");
  const Vec grid = Vec::LinSpaced(samples, ibi_t[0], ibi_t[0] + step * static_cast<double>(samples - 1));
  Vec tach = cubic_spline(ibi_t, ibi, grid);
  tach.array() -= tach.mean();

  WelchConfig w;
  w.segment = static_cast<int>(std::min<Eigen::Index>(samples, 256));
  const Spectrum s = psd_welch(tach, cfg.tachogram_fs, w);
  const double df = s.freqs.size() > 1 ? s.freqs[1] - s.freqs[0] : 0.0;
  auto band_power = [&](const BandConfig& b) {
    double p = 0.0;
    for (Eigen::Index i = 0; i < s.freqs.size(); ++i) {
      if (s.freqs[i] >= b.lo && s.freqs[i] < b.hi) p += s.power[i] * df;
    }
    return p;
  };
  h.lf = band_power(cfg.lf);
  h.hf = band_power(cfg.hf);
  if (h.lf + h.hf < cfg.flat_variance) {
    h.warning = "no variability: LF and HF power are both ~0; ratios defined as 0";
    return h;
  }
  h.lf_nu = h.lf / (h.lf + h.hf);
  h.hf_nu = h.hf / (h.lf + h.hf);
  h.lf_hf = h.hf > 0.0 ? h.lf / h.hf : std::numeric_limits<double>::infinity();
  return h;
}

namespace {

HrvAggregate aggregate(const std::vector<HrvMetrics>& pred, const std::vector<HrvMetrics>& truth,
                       double HrvMetrics::*field) {
  const auto n = static_cast<Eigen::Index>(pred.size());
  Vec p(n), t(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    p[i] = pred[i].*field;
    t[i] = truth[i].*field;
  }
  HrvAggregate a;
  a.std = population_std(p);
  a.rmse = std::sqrt((p - t).squaredNorm() / static_cast<double>(n));
  a.rho = n >= 2 ? pearson_or_nan(p, t) : kNaN;
  return a;
}

json to_json(const HrvAggregate& a) {
  return json{{"std", number_or_null(a.std)}, {"rmse", number_or_null(a.rmse)}, {"rho", number_or_null(a.rho)}};
}

json to_json(const HrvMetrics& m) {
  json j{{"lfNu", m.lf_nu}, {"hfNu", m.hf_nu}, {"lfHf", number_or_null(m.lf_hf)}, {"beats", m.beats}};
  if (!m.warning.empty()) j["warning"] = m.warning;
  return j;
}

}  // namespace

HrvReport hrv_report(const std::vector<std::string>& ids, const std::vector<HrvMetrics>& pred,
                     const std::vector<HrvMetrics>& truth) {
  require(!ids.empty() && ids.size() == pred.size() && pred.size() == truth.size(), "hrv_report: unpaired inputs");
  HrvReport r;
  r.ids = ids;
  r.pred = pred;
  r.truth = truth;
  r.lf_nu = aggregate(pred, truth, &HrvMetrics::lf_nu);
  r.hf_nu = aggregate(pred, truth, &HrvMetrics::hf_nu);
  r.lf_hf = aggregate(pred, truth, &HrvMetrics::lf_hf);
  return r;
}

json to_json(const HrvReport& r) {
  json per = json::array();
  for (std::size_t i = 0; i < r.ids.size(); ++i) {
    per.push_back({{"id", r.ids[i]}, {"pred", to_json(r.pred[i])}, {"true", to_json(r.truth[i])}});
  }
  return json{{"perVideo", per},
              {"lfNu", to_json(r.lf_nu)},
              {"hfNu", to_json(r.hf_nu)},
              {"lfHf", to_json(r.lf_hf)}};
}

// ---------------------------------------------------------------------------

namespace {

template <class Predict>
VideoTraces per_video(const Corpus& corpus, Split split, Predict&& predict) {
  VideoTraces out;
  const std::vector<const ClipRecord*> clips = corpus.split(split);
  require(!clips.empty(), "evaluation: split '" + to_string(split) + "' is empty");
  std::size_t i = 0;
  while (i < clips.size()) {
    const int video = clips[i]->video;
    std::vector<Vec> preds;
    std::vector<const Vec*> cleans;
    for (; i < clips.size() && clips[i]->video == video; ++i) {
      preds.push_back(predict(*clips[i]));
      cleans.push_back(&clips[i]->clean);
    }
    std::vector<const Vec*> pp;
    for (const Vec& p : preds) pp.push_back(&p);
    out.videos.push_back(video);
    out.pred.emplace_back(concat(pp), corpus.cfg.fs, TraceKind::estimate);
    out.clean.emplace_back(concat(cleans), corpus.cfg.fs);
  }
  return out;
}

}  // namespace

VideoTraces predict_videos(C2fModel& model, const Corpus& corpus, Split split) {
  return per_video(corpus, split, [&](const ClipRecord& c) { return c2f_predict(model, c.clip).samples(); });
}

std::string to_string(Baseline b) {
  switch (b) {
    case Baseline::green: return "green";
    case Baseline::chrom: return "chrom";
    case Baseline::pos: return "pos";
  }
  return "?";
}

Baseline baseline_from_string(const std::string& s) {
  for (Baseline b : {Baseline::green, Baseline::chrom, Baseline::pos}) {
    if (to_string(b) == s) return b;
  }
  throw InvalidArgument("unknown baseline '" + s + "' (green, chrom, pos)");
}

VideoTraces baseline_videos(Baseline method, const Corpus& corpus, Split split) {
  return per_video(corpus, split, [&](const ClipRecord& c) {
    const RgbTrace rgb = extract_rgb(c.clip);
    switch (method) {
      case Baseline::green: return green_method(rgb).samples();
      case Baseline::chrom: return chrom_method(rgb).samples();
      case Baseline::pos: break;
    }
    return pos_method(rgb).samples();
  });
}

MetricReport evaluate_traces(const VideoTraces& traces) {
  std::vector<HrPair> pairs;
  for (std::size_t i = 0; i < traces.videos.size(); ++i) {
    pairs.push_back({"video" + std::to_string(traces.videos[i]), hr_from_trace(traces.pred[i]),
                     hr_from_trace(traces.clean[i])});
  }
  return hr_metrics(pairs);
}

// ---------------------------------------------------------------------------

std::vector<FidelityRow> fidelity_sweep(LqModule& module, const std::vector<LabelSample>& samples,
                                        const std::vector<int>& bits) {
  require(!samples.empty(), "fidelity_sweep: no samples");
  require(!bits.empty(), "fidelity_sweep: no bit levels");
  std::vector<PulseTrace> truth;
  for (const LabelSample& s : samples) truth.push_back(s.y);
  std::vector<FidelityRow> rows;
  for (int n : bits) {
    require(module.codebooks.count(n) > 0, "fidelity_sweep: module has no level " + std::to_string(n));
    std::vector<PulseTrace> pseudo, uniform;
    std::vector<Assignment> assignments;
    for (const LabelSample& s : samples) {
      LqQuantized q = lq_quantize(s.y, n, module);
      pseudo.push_back(q.pseudo);
      uniform.emplace_back(uniform_quantize(q.y_tilde, n).quantized, s.y.fs(), TraceKind::pseudo, n);
      assignments.push_back(std::move(q.assignment));
    }
    FidelityRow row;
    row.bits = n;
    row.mae = label_fidelity_mae(pseudo, truth, module.band);
    row.uniform_mae = label_fidelity_mae(uniform, truth, module.band);
    row.utilization = utilization(assignments, module.codebooks.at(n).size());
    rows.push_back(std::move(row));
  }
  return rows;
}

json to_json(const std::vector<FidelityRow>& rows) {
  json out = json::array();
  for (const FidelityRow& r : rows) {
    out.push_back({{"bits", r.bits},
                   {"mae", r.mae},
                   {"uniformMae", r.uniform_mae},
                   {"utilization", std::vector<double>(r.utilization.data(), r.utilization.data() + r.utilization.size())}});
  }
  return out;
}

std::string fidelity_csv(const std::vector<FidelityRow>& rows) {
  std::ostringstream os;
  os << "bits,mae,uniform_mae,codes_used\n";
  for (const FidelityRow& r : rows) {
    os << r.bits << ',' << fmt(r.mae) << ',' << fmt(r.uniform_mae) << ',' << (r.utilization.array() > 0.0).count()
       << '/' << r.utilization.size() << '\n';
  }
  return os.str();
}

std::vector<std::vector<int>> progressive_masks(int max_bits) {
  require(max_bits >= 1, "progressive_masks: max_bits must be >= 1");
  std::vector<std::vector<int>> out;
  for (int lo = max_bits; lo >= 1; --lo) {
    std::vector<int> m;
    for (int n = lo; n <= max_bits; ++n) m.push_back(n);
    out.push_back(m);
  }
  return out;
}

std::vector<std::vector<int>> leave_one_bit_masks(int max_bits) {
  require(max_bits >= 1, "leave_one_bit_masks: max_bits must be >= 1");
  std::vector<int> full(static_cast<std::size_t>(max_bits));
  std::iota(full.begin(), full.end(), 1);
  std::vector<std::vector<int>> out{full};
  for (int drop = 1; drop < max_bits; ++drop) {
    std::vector<int> m;
    for (int n : full) {
      if (n != drop) m.push_back(n);
    }
    out.push_back(m);
  }
  return out;
}

json to_json(const SweepTable& t) {
  json rows = json::array();
  for (const SweepRow& r : t.rows) {
    rows.push_back({{"label", r.label}, {"params", r.params}, {"metrics", to_json(r.metrics)}});
  }
  return json{{"kind", t.kind}, {"rows", rows}};
}

std::string sweep_csv(const SweepTable& t) {
  std::ostringstream os;
  os << "label,mae,rmse,mape,rho\n";
  for (const SweepRow& r : t.rows) {
    os << '"' << r.label << "\"," << fmt(r.metrics.mae) << ',' << fmt(r.metrics.rmse) << ','
       << fmt(r.metrics.mape) << ',' << fmt(r.metrics.rho) << '\n';
  }
  return os.str();
}

std::string sweep_text(const SweepTable& t) {
  std::size_t width = 6;
  for (const SweepRow& r : t.rows) width = std::max(width, r.label.size() + 2);
  std::ostringstream os;
  os << t.kind << "\n" << std::left << std::setw(static_cast<int>(width)) << "label" << std::setw(9) << "MAE"
     << std::setw(9) << "RMSE" << std::setw(9) << "MAPE" << "rho\n";
  for (const SweepRow& r : t.rows) {
    os << std::setw(static_cast<int>(width)) << r.label << std::setw(9) << fmt(r.metrics.mae, 3) << std::setw(9)
       << fmt(r.metrics.rmse, 3) << std::setw(9) << fmt(r.metrics.mape, 3) << fmt(r.metrics.rho, 3) << "\n";
  }
  return os.str();
}

SweepTable mask_sweep(const std::string& kind, const Corpus& corpus, const PseudoLabelBank& bank, const C2fCfg& model,
                      const Stage2Cfg& train, const std::vector<std::vector<int>>& masks, std::uint64_t seed,
                      Split eval_split) {
  SweepTable table{kind, {}};
  for (const auto& mask : masks) {
    C2fModel m = C2fModel::create(model, seed);
    Stage2Cfg cfg = train;
    cfg.supervision = Supervision::c2f;
    cfg.loss.mask = mask;
    cfg.checkpoint_dir.clear();
    cfg.resume = false;
    train_stage2(corpus, bank, m, cfg);
    SweepRow row;
    row.label = mask_label(mask);
    row.params = json{{"mask", mask}, {"seed", seed}};
    row.metrics = evaluate_traces(predict_videos(m, corpus, eval_split));
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::vector<SupervisionRow> supervision_comparison(const Corpus& corpus, const PseudoLabelBank& bank,
                                                   const C2fCfg& model, const Stage2Cfg& train,
                                                   const std::vector<Supervision>& variants,
                                                   const std::vector<std::uint64_t>& seeds, Split eval_split) {
  require(!variants.empty() && !seeds.empty(), "supervision_comparison: need variants and seeds");
  std::vector<SupervisionRow> rows;
  for (Supervision v : variants) {
    SupervisionRow row;
    row.variant = v;
    for (std::uint64_t seed : seeds) {
      C2fCfg mc = model;
      mc.variance_head = mc.variance_head || v == Supervision::gaussianNll;
      C2fModel m = C2fModel::create(mc, seed);
      Stage2Cfg cfg = train;
      cfg.supervision = v;
      cfg.seed = seed;
      cfg.checkpoint_dir.clear();
      cfg.resume = false;
      train_stage2(corpus, bank, m, cfg);
      row.mae.push_back(evaluate_traces(predict_videos(m, corpus, eval_split)).mae);
    }
    const Eigen::Map<const Vec> mae(row.mae.data(), static_cast<Eigen::Index>(row.mae.size()));
    row.mean = mae.mean();
    row.std = mae.size() > 1 ? std::sqrt((mae.array() - row.mean).square().sum() / static_cast<double>(mae.size() - 1))
                             : 0.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

json to_json(const std::vector<SupervisionRow>& rows) {
  json out = json::array();
  for (const SupervisionRow& r : rows) {
    out.push_back({{"variant", to_string(r.variant)}, {"mae", r.mae}, {"mean", r.mean}, {"std", r.std}});
  }
  return out;
}

std::string supervision_csv(const std::vector<SupervisionRow>& rows) {
  std::ostringstream os;
  os << "variant,mean_mae,std_mae\n";
  for (const SupervisionRow& r : rows) os << to_string(r.variant) << ',' << fmt(r.mean) << ',' << fmt(r.std) << '\n';
  return os.str();
}

}  // namespace lqrppg
