#pragma once

// Coarse-to-fine estimator (Stage 2): frame stem, positional encoding, N-1
// refinement steps under multi-bit supervision, the rPPG estimator head, the
// Stage-2 objectives, final-output supervision variants, and the two-stage
// and end-to-end training loops.

#include "lqrppg/datagen.hpp"
#include "lqrppg/nn.hpp"
#include "lqrppg/optim.hpp"
#include "lqrppg/stage1.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace lqrppg {

struct C2fCfg {
  int max_bits = 5;  // N; the refiner has N - 1 steps
  int channels = 64;  // C'
  int frames = 160;   // T, fixes the positional encoding
  int stem_hidden1 = 8;
  int stem_hidden2 = 16;
  BiMambaCfg mamba{64, 16, 5, 2, false};
  double tau = 1.0;            // soft reconstruction temperature
  bool variance_head = false;  // extra 64 -> 1 head for the Gaussian NLL variant

  int steps() const { return max_bits - 1; }
  void validate() const;
};

io::json to_json(const C2fCfg& cfg);
C2fCfg c2f_cfg_from_json(const io::json& j);

/// Supervision settings. `c2f` is the hierarchical objective; the others
/// supervise the final output only (mask {N} forward).
enum class Supervision { c2f, raw, bpf, quant, quantCls, bpfQuant, bpfQuantCls, huber, movingAvg, gaussianNll };

std::string to_string(Supervision s);
/// Throws InvalidArgument for unknown names.
Supervision supervision_from_string(const std::string& s);
/// Whether the final output is soft-reconstructed (classification settings).
bool uses_soft_output(Supervision s);

/// Stem layout: raw and difference branches, each conv(k5, s2) -> norm -> GELU
/// -> conv(k3, s2) -> norm -> GELU; branch sum; conv(k3, s2) to C'; spatial mean.
/// Parameter names: stem.{raw,diff}.{conv1,norm1,conv2,norm2}, stem.conv3, pe,
/// step<n>.{mamba,cls,proj}, est.conv{1..4}, var.
struct C2fModel {
  C2fCfg cfg;
  ParamStore<float> params;
  std::vector<Vec> codebooks;  // levels 1..N, copied from the bank at training
  std::uint64_t seed = 0;
  Supervision supervision = Supervision::c2f;  // set by training; selects the output head
  std::vector<int> mask;                       // supervised levels of the last training run

  static C2fModel create(const C2fCfg& cfg, std::uint64_t seed);
  /// Throws InvalidArgument unless codebooks exist for levels 1..N with 2^n codes.
  void require_codebooks() const;
};

/// Sets the bias of every classification head (step<n>.cls and the final
/// est.conv4) to the midpoint of its level's code range. Outside the code range
/// the distance softmax does not depend on the logit, so a head whose logits
/// start there receives no gradient. Requires codebooks.
void center_heads(C2fModel& model);

/// Trainable scalars of the model.
std::size_t c2f_param_count(const C2fModel& model);
/// Same count summed from the declared layer shapes (no store needed).
std::size_t c2f_declared_param_count(const C2fCfg& cfg);

void save_c2f(const C2fModel& model, const std::filesystem::path& stem, const io::json& extra = io::json::object());
C2fModel load_c2f(const std::filesystem::path& stem, io::json* extra = nullptr);

// ---------------------------------------------------------------------------
// Forward pieces. Feature maps are (F*H*W) x C rows, frame-major.

struct StemInput {
  ad::Mat<double> raw;   // pixels / 255
  ad::Mat<double> diff;  // frame t+1 minus frame t; the last frame repeats, so its row block is zero
  int frames = 0;
  int height = 0;
  int width = 0;
};

/// Throws InvalidArgument unless the clip has 3 channels.
StemInput make_stem_input(const ClipTensor& clip);

template <class S>
ad::Var<S> stem_forward(ad::Tape<S>& tape, ParamStore<S>& store, const C2fCfg& cfg, const ad::Var<S>& raw,
                        const ad::Var<S>& diff, int frames, int height, int width);

template <class S>
struct RefineOut {
  ad::Var<S> features;                // F_{m_{N-1}}
  std::vector<ad::Var<S>> logits;     // per step n = 1..N-1; unset (null tape) when the step is inactive
  std::vector<ad::Var<S>> recon;
};

/// F_{m_0} = F_stem + PE; step n: F' = BiMamba_n(F), l_n = cls_n(F'),
/// y_n = soft_reconstruct(l_n, codes[n-1]), F = F' + sum of proj_i(y_i) over
/// active steps i <= n. Inactive steps keep their BiMamba block only.
template <class S>
RefineOut<S> refine_forward(ad::Tape<S>& tape, ParamStore<S>& store, const C2fCfg& cfg, const ad::Var<S>& stem,
                            const std::vector<Vec>& codes, const std::vector<bool>& active);

template <class S>
struct EstimateOut {
  ad::Var<S> logits;  // l_N, T x 1
  ad::Var<S> recon;   // soft_reconstruct(l_N, c_N)
};

template <class S>
EstimateOut<S> estimate_forward(ad::Tape<S>& tape, ParamStore<S>& store, const C2fCfg& cfg, const ad::Var<S>& fm,
                                const Vec& codes_n);

template <class S>
struct C2fOut {
  RefineOut<S> refine;
  EstimateOut<S> est;
  ad::Var<S> log_sd;  // set when the variance head exists
};

template <class S>
C2fOut<S> c2f_forward(ad::Tape<S>& tape, ParamStore<S>& store, const C2fCfg& cfg, const StemInput& input,
                      const std::vector<Vec>& codes, const std::vector<bool>& active);

// ---------------------------------------------------------------------------
// Objectives

struct C2fLossCfg {
  double lambda_ce = 1.0;
  double lambda_time = 0.2;
  double lambda_freq = 1.0;
  std::vector<int> mask;  // supervised levels; empty = 1..N. N must be present.
  int nfft = 0;           // spectral CE transform length, 0: fine_nfft(T)

  /// Sorted mask for N levels (expanding an empty mask). Throws InvalidArgument
  /// on levels outside 1..N or a mask without N.
  std::vector<int> levels(int max_bits) const;
  /// active[n-1] for refinement steps n = 1..N-1.
  std::vector<bool> active_steps(int max_bits) const;
  void validate(int max_bits) const;
};

/// Pseudo-label targets for one clip at levels 1..N.
struct C2fTargets {
  std::vector<Vec> y;                      // y_n
  std::vector<std::vector<int>> indices;   // i_n
};

C2fTargets targets_from_record(const PseudoLabelRecord& record);

/// (lambda_ce / N) * sum over the mask of distance CE(l_n, i_n).
template <class S>
ad::Var<S> c2f_cls_loss(ad::Tape<S>& tape, const C2fOut<S>& out, const C2fTargets& targets,
                        const std::vector<Vec>& codes, const C2fLossCfg& cfg, int max_bits, double tau = 1.0);

/// Sum over the mask of lambda_time * Neg(y^_n, y_n) + lambda_freq * specCE(y^_n, peak of y_n).
/// A constant y^_n or y_n makes Neg undefined: that term contributes 1 with no
/// gradient and increments `flat_terms` when given.
template <class S>
ad::Var<S> c2f_rec_loss(ad::Tape<S>& tape, const C2fOut<S>& out, const C2fTargets& targets, const C2fLossCfg& cfg,
                        int max_bits, double fs, const BandConfig& band = kPulseBand, int* flat_terms = nullptr);

// ---------------------------------------------------------------------------
// Final-output supervision settings

/// Final-output target for a non-hierarchical setting.
struct FinalTarget {
  Vec y;                     // regression / reconstruction target
  std::vector<int> indices;  // 5-bit code indices (classification settings)
};

FinalTarget final_target(Supervision s, const PseudoLabelRecord& record, const Vec& codes_n);

/// Loss of a final-output setting. Regression settings use Neg + specCE on
/// the raw head output; huber adds SmoothL1, gaussianNll adds the Gaussian
/// NLL of the variance head; classification settings use the mask-{N}
/// objective.
template <class S>
ad::Var<S> alt_supervision_loss(ad::Tape<S>& tape, Supervision s, const C2fOut<S>& out, const FinalTarget& target,
                                const Vec& codes_n, const C2fLossCfg& cfg, int max_bits, double fs, double tau = 1.0,
                                int* flat_terms = nullptr);

// ---------------------------------------------------------------------------
// Training

struct Stage2Cfg {
  int epochs = 50;
  int batch = 16;
  AdamWConfig adam{3e-4, 0.9, 0.999, 1e-8, 1e-5};
  double pct_start = 0.25;
  C2fLossCfg loss;
  Supervision supervision = Supervision::c2f;
  std::uint64_t seed = 0;  // shuffling; epoch e uses derive_seed(seed, e)
  /// When set, model, optimizer state and the log are written after every
  /// epoch; with `resume`, training continues from the last completed epoch.
  std::filesystem::path checkpoint_dir;
  bool resume = false;
  /// Center the classification heads on the bank's code ranges before the
  /// first epoch (see center_heads).
  bool center_heads = true;

  void validate(int max_bits) const;
};

struct Stage2EpochLog {
  int epoch = 0;
  double total = 0.0;
  double cls = 0.0;
  double rec = 0.0;
  double lr = 0.0;
  int flat_terms = 0;  // Neg terms skipped for a constant prediction or target
};

io::json to_json(const Stage2EpochLog& e);

using Stage2Callback = std::function<void(const Stage2EpochLog&)>;

/// Trains on every train-split clip of `corpus`, pairing clips with bank
/// records by (video, clip index). Throws InvalidArgument on missing pairs,
/// rate or length mismatches, or a bank whose depth differs from the model's;
/// NumericalError on a non-finite loss (after checkpointing the last good
/// epoch when a checkpoint directory is set).
std::vector<Stage2EpochLog> train_stage2(const Corpus& corpus, const PseudoLabelBank& bank, C2fModel& model,
                                         const Stage2Cfg& cfg, const Stage2Callback& on_epoch = {});

struct E2eEpochLog {
  int epoch = 0;
  double total = 0.0;
  double lq = 0.0;   // summed Stage-1 losses over levels
  double c2f = 0.0;  // cls + rec
  double lr = 0.0;
  int flat_terms = 0;
};

io::json to_json(const E2eEpochLog& e);

/// Joint training: pseudo labels come from the current LQ module at every
/// step; the objective is the sum of the per-level Stage-1 losses and the C2F
/// loss; both parameter sets step together and codebooks follow EMA.
std::vector<E2eEpochLog> train_end_to_end(const Corpus& corpus, LqModule& lq, C2fModel& model, const Stage2Cfg& cfg,
                                          const Stage1Cfg& lq_cfg,
                                          const std::function<void(const E2eEpochLog&)>& on_epoch = {});

// ---------------------------------------------------------------------------
// Inference

/// Final rPPG trace for one clip: the soft reconstruction for hierarchical
/// and classification settings, the raw head output for regression settings.
PulseTrace c2f_predict(C2fModel& model, const ClipTensor& clip);

}  // namespace lqrppg
