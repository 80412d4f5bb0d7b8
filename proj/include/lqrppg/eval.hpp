#pragma once

// Evaluation: HR metrics with standard errors, the paired signed-rank test,
// HRV from beat intervals, per-video model evaluation, and the sweep tables
// (bit fidelity, supervision masks, supervision settings).

#include "lqrppg/baselines.hpp"
#include "lqrppg/stage2.hpp"

#include <optional>
#include <string>
#include <vector>

namespace lqrppg {

// ---------------------------------------------------------------------------
// HR metrics

struct HrPair {
  std::string id;
  double pred = 0.0;   // bpm
  double truth = 0.0;  // bpm
};

struct StandardErrors {
  double se_mae = 0.0;
  double se_rmse = 0.0;
  double se_rho = 0.0;  // NaN when N < 3
};

struct MetricReport {
  std::vector<HrPair> per_video;
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;  // percent
  double rho = 0.0;   // NaN when predictions or truths are constant
  StandardErrors se;
  io::json meta = io::json::object();
};

/// MAE, RMSE, MAPE (percent of truth) and Pearson rho over the pairs.
/// Throws InvalidArgument for fewer than 2 pairs or a non-positive truth.
MetricReport hr_metrics(const std::vector<HrPair>& pairs);

/// SE(MAE) = std(|d|) / sqrt(N) (population std); SE(RMSE) by the delta method
/// on the mean squared error, std(d^2) / (2 RMSE sqrt(N)) (0 when RMSE = 0);
/// SE(rho) = sqrt((1 - rho^2) / (N - 2)). Throws InvalidArgument for N < 2.
StandardErrors standard_errors(const std::vector<HrPair>& pairs);

io::json to_json(const MetricReport& r);
std::string metrics_csv(const MetricReport& r);
std::string metrics_text(const MetricReport& r);

// ---------------------------------------------------------------------------
// Paired two-sided Wilcoxon signed-rank test

struct WilcoxonResult {
  int n = 0;      // non-zero deltas
  int win = 0;    // delta > 0
  int tie = 0;    // delta == 0
  int loss = 0;   // delta < 0
  double median_delta = 0.0;  // over all deltas, zeros included
  double w_plus = 0.0;        // sum of positive ranks
  double p = 1.0;
  bool exact = true;
};

inline constexpr int kWilcoxonExactMax = 20;

/// Zeros are dropped from the ranking and counted as ties; tied magnitudes get
/// mean ranks. Exact p by enumerating the signed-rank distribution for
/// n <= kWilcoxonExactMax, normal approximation with tie correction above.
/// Throws InvalidArgument when every delta is zero.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& deltas);

/// Two-sided exact p for the given (mean) ranks and positive-rank sum,
/// P(|W+ - mu| >= |w - mu|) over all 2^n sign patterns.
double wilcoxon_exact_p(const std::vector<double>& ranks, double w_plus);

io::json to_json(const WilcoxonResult& w);

// ---------------------------------------------------------------------------
// HRV

struct HrvConfig {
  double min_separation = 60.0 / 180.0;  // s between beats
  double prominence = 0.3;               // times the trace std
  double tachogram_fs = 4.0;             // Hz, cubic resampling of the IBI series
  BandConfig lf{0.04, 0.15};
  BandConfig hf{0.15, 0.4};
  int min_beats = 10;
  double min_duration = 60.0;      // s
  double flat_variance = 1e-10;    // s^2; LF + HF below this counts as no variability
};

struct HrvMetrics {
  double lf_nu = 0.0;
  double hf_nu = 0.0;
  double lf_hf = 0.0;
  double lf = 0.0;  // s^2
  double hf = 0.0;  // s^2
  int beats = 0;
  std::string warning;  // set for the no-variability case (all ratios defined as 0)
};

/// Local maxima at least `min_separation` apart (higher peaks win) whose
/// topographic prominence is at least `prominence` times the std of x.
/// Returns sample indices in increasing order.
std::vector<int> detect_peaks(const Vec& x, double fs, const HrvConfig& cfg = {});

/// Natural cubic spline through (t, y) evaluated at `at` (t strictly increasing,
/// `at` clamped to [t.front(), t.back()]).
Vec cubic_spline(const Vec& t, const Vec& y, const Vec& at);

/// Peaks (refined by parabolic interpolation), inter-beat intervals, 4 Hz
/// cubic tachogram, Welch PSD, LF/HF band powers. Throws InvalidArgument for
/// traces shorter than `min_duration` and DataError for fewer than
/// `min_beats` beats.
HrvMetrics hrv_metrics(const PulseTrace& trace, const HrvConfig& cfg = {});

struct HrvAggregate {
  double std = 0.0;   // std of the predicted metric across videos
  double rmse = 0.0;  // against the reference metric
  double rho = 0.0;
};

struct HrvReport {
  std::vector<std::string> ids;
  std::vector<HrvMetrics> pred;
  std::vector<HrvMetrics> truth;
  HrvAggregate lf_nu, hf_nu, lf_hf;
};

HrvReport hrv_report(const std::vector<std::string>& ids, const std::vector<HrvMetrics>& pred,
                     const std::vector<HrvMetrics>& truth);
io::json to_json(const HrvReport& r);

// ---------------------------------------------------------------------------
// Per-video evaluation on a corpus split. Clips of a video are concatenated in
// clip order; the reference HR is that of the concatenated clean pulse.

struct VideoTraces {
  std::vector<int> videos;
  std::vector<PulseTrace> pred;
  std::vector<PulseTrace> clean;
};

VideoTraces predict_videos(C2fModel& model, const Corpus& corpus, Split split);

enum class Baseline { green, chrom, pos };
std::string to_string(Baseline b);
Baseline baseline_from_string(const std::string& s);

VideoTraces baseline_videos(Baseline method, const Corpus& corpus, Split split);

MetricReport evaluate_traces(const VideoTraces& traces);

// ---------------------------------------------------------------------------
// Sweep tables

struct FidelityRow {
  int bits = 0;
  double mae = 0.0;          // learned codebook
  double uniform_mae = 0.0;  // uniform codes on the band-passed label
  Vec utilization;           // per-code assignment fraction
};

/// Fidelity of the pseudo labels of every trace at each bit level against the
/// label itself. The module must hold levels covering `bits`.
std::vector<FidelityRow> fidelity_sweep(LqModule& module, const std::vector<LabelSample>& samples,
                                        const std::vector<int>& bits);

io::json to_json(const std::vector<FidelityRow>& rows);
std::string fidelity_csv(const std::vector<FidelityRow>& rows);

/// Masks for the coarse-to-fine ablations at depth N.
/// progressive: {N}, {N-1, N}, ..., {1..N}; leave-one-bit: {1..N}, then the
/// full mask without level k for k = 1..N-1.
std::vector<std::vector<int>> progressive_masks(int max_bits);
std::vector<std::vector<int>> leave_one_bit_masks(int max_bits);

struct SweepRow {
  std::string label;
  io::json params = io::json::object();
  MetricReport metrics;
};

struct SweepTable {
  std::string kind;
  std::vector<SweepRow> rows;
};

io::json to_json(const SweepTable& t);
std::string sweep_csv(const SweepTable& t);
std::string sweep_text(const SweepTable& t);

/// Trains one C2F model per mask on the train split and evaluates it on
/// `eval_split`.
SweepTable mask_sweep(const std::string& kind, const Corpus& corpus, const PseudoLabelBank& bank, const C2fCfg& model,
                      const Stage2Cfg& train, const std::vector<std::vector<int>>& masks, std::uint64_t seed,
                      Split eval_split = Split::test);

struct SupervisionRow {
  Supervision variant = Supervision::c2f;
  std::vector<double> mae;  // per seed
  double mean = 0.0;
  double std = 0.0;  // sample std over seeds (0 for one seed)
};

/// Per setting and seed: model init and shuffling use the seed; the model is
/// evaluated on `eval_split`.
std::vector<SupervisionRow> supervision_comparison(const Corpus& corpus, const PseudoLabelBank& bank,
                                                   const C2fCfg& model, const Stage2Cfg& train,
                                                   const std::vector<Supervision>& variants,
                                                   const std::vector<std::uint64_t>& seeds,
                                                   Split eval_split = Split::test);

io::json to_json(const std::vector<SupervisionRow>& rows);
std::string supervision_csv(const std::vector<SupervisionRow>& rows);

}  // namespace lqrppg
