#pragma once

// Label quantization (Stage 1): per-bit encoders over the band-passed label,
// scalar codebooks with EMA refinement, the Stage-1 losses and training loop,
// and the frozen multi-bit pseudo-label bank consumed by Stage 2.

#include "lqrppg/codebook.hpp"
#include "lqrppg/datagen.hpp"
#include "lqrppg/nn.hpp"
#include "lqrppg/optim.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace lqrppg {

struct LqLossCfg {
  double lambda_time = 0.2;
  double lambda_freq = 1.0;
  double lambda_feat = 0.5;
  int nfft = 0;  // spectral CE transform length, 0: fine_nfft(T)

  BandBins bins(int n, double fs, const BandConfig& band) const;
  void validate() const;
};

/// E_n = BiMamba(d = 1) after the dilated conv block. The dilated block starts
/// from the exact identity plus `dilated_perturb` times a fan-in draw; the
/// state-space residual branch starts at `residual_gain` (its norm gain), so a
/// fresh encoder stays close to the identity on the z-scored label.
struct LqEncoderCfg {
  DilatedBlockCfg dilated;
  BiMambaCfg mamba{1, 16, 5, 2, false};
  double dilated_perturb = 0.1;
  double residual_gain = 0.1;

  DilatedConvBlock dilated_block() const { return {"dilated", dilated}; }
  BiMamba mamba_block() const { return {"mamba", mamba}; }
  void validate() const;
};

io::json to_json(const LqEncoderCfg& cfg);
LqEncoderCfg lq_encoder_cfg_from_json(const io::json& j);

struct LqModule {
  int max_bits = 5;
  double fs = 30.0;
  BandConfig band = kPulseBand;
  LqEncoderCfg encoder;
  std::map<int, ParamStore<float>> encoders;  // n -> E_n
  std::map<int, Codebook> codebooks;          // n -> c_n
  io::json provenance = io::json::object();   // training-set description

  /// Fresh encoders (seeded per bit level) and placeholder uniform codebooks
  /// that training replaces with quantiles of the first batch.
  static LqModule create(int max_bits, const LqEncoderCfg& encoder, std::uint64_t seed, double fs = 30.0);

  /// Throws InvalidArgument unless every level 1..max_bits has an encoder and
  /// a codebook of the matching size.
  void validate() const;

  /// Digest over every encoder parameter and codebook.
  std::string id() const;
};

void save_lq_module(const LqModule& module, const std::filesystem::path& dir);
LqModule load_lq_module(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------

/// y~ = zscore(bandpass(y)). Throws InvalidArgument for a constant label.
Vec lq_preprocess(const PulseTrace& y, const BandConfig& band = kPulseBand);

/// Encoder graph on a T x 1 input.
template <class S>
ad::Var<S> lq_encoder_forward(ad::Tape<S>& tape, ParamStore<S>& store, const LqEncoderCfg& cfg,
                              const ad::Var<S>& x);

/// z_n = E_n(y~) for a raw label.
Vec lq_encode(const PulseTrace& y, int n, LqModule& module);

struct LqQuantized {
  PulseTrace pseudo;  // y_n, kind pseudo, bits n
  Assignment assignment;
  Vec y_tilde;
  Vec z;
};

LqQuantized lq_quantize(const PulseTrace& y, int n, LqModule& module);

struct LqLossParts {
  double total = 0.0;
  double time = 0.0;  // Neg(y~, y_n)
  double freq = 0.0;  // spectral CE of y_n against the y~ peak bin
  double feat = 0.0;  // ||z_n - sg(y_n)||^2
};

template <class S>
struct LqGraph {
  ad::Var<S> total;
  LqLossParts parts;
  Assignment assignment;
  Vec z;
};

/// Stage-1 loss on a latent: y_n = STE(z, codes[i(z)]). When y_n is constant
/// the correlation term is undefined; it then contributes its value at zero
/// correlation (1) without gradient.
template <class S>
LqGraph<S> lq_loss_from_latent(ad::Tape<S>& tape, const ad::Var<S>& z, const Vec& codes, const Vec& y_tilde,
                               const BandBins& bins, const LqLossCfg& cfg);

/// Full loss graph for one band-passed, z-scored label.
template <class S>
LqGraph<S> lq_loss_graph(ad::Tape<S>& tape, ParamStore<S>& store, const LqEncoderCfg& enc, const Vec& y_tilde,
                         const Vec& codes, double fs, const BandConfig& band, const LqLossCfg& cfg);

/// Loss value for a raw label (no update). Requires T >= 64.
LqLossParts lq_loss(const PulseTrace& y, int n, LqModule& module, const LqLossCfg& cfg = {});

// ---------------------------------------------------------------------------

struct LabelSample {
  PulseTrace y;
  int video = -1;
  int index = 0;
  Split split = Split::train;
};

/// Label samples of one corpus split.
std::vector<LabelSample> label_samples(const Corpus& corpus, Split split);

struct Stage1Cfg {
  int epochs = 30;
  int batch = 16;
  AdamWConfig adam{1e-3, 0.9, 0.999, 1e-8, 0.0};
  double pct_start = 0.25;
  LqLossCfg loss;
  std::uint64_t seed = 0;  // shuffling; encoder init comes from LqModule::create
  std::vector<int> bits;   // levels to train, empty = 1..max_bits

  void validate() const;
};

struct Stage1EpochLog {
  int bits = 0;
  int epoch = 0;
  LqLossParts loss;  // batch means averaged over the epoch
  double lr = 0.0;   // last learning rate of the epoch
  double codebook_usage = 0.0;  // fraction of codes hit during the epoch
};

using Stage1Callback = std::function<void(const Stage1EpochLog&)>;

/// Trains each requested bit level independently. Every sample must come from
/// the train split. EMA runs once per batch on the batch's latents, after the
/// optimizer step, using the assignments made in the forward pass.
std::vector<Stage1EpochLog> train_stage1(const std::vector<LabelSample>& train, LqModule& module,
                                         const Stage1Cfg& cfg, const Stage1Callback& on_epoch = {});

// ---------------------------------------------------------------------------
// Pseudo-label bank

struct PseudoLabelRecord {
  int video = -1;
  int index = 0;
  Split split = Split::train;
  Vec y;        // label as supplied (after resampling)
  Vec y_tilde;  // band-passed, z-scored
  std::vector<Vec> y_n;                         // levels 1..N, values are codes
  std::vector<std::vector<std::int16_t>> i_n;   // levels 1..N, 0-based code indices
};

struct PseudoLabelBank {
  int max_bits = 0;
  double fs = 30.0;
  std::vector<std::string> codebook_hashes;  // levels 1..N
  std::vector<Vec> codebooks;                // levels 1..N
  std::string module_id;
  io::json provenance = io::json::object();
  std::vector<PseudoLabelRecord> records;

  /// Record for (video, clip index); throws InvalidArgument when absent.
  const PseudoLabelRecord& find(int video, int index) const;
};

struct ExportCfg {
  bool resample = false;  // linear resampling to the module rate when rates differ
};

PseudoLabelBank export_pseudo_labels(const std::vector<LabelSample>& items, LqModule& module,
                                     const ExportCfg& cfg = {});

inline constexpr int kBankFormatVersion = 1;

/// One directory per split under `dir`, each with manifest.json and per-record
/// float32 / int16 arrays.
void write_bank(const PseudoLabelBank& bank, const std::filesystem::path& dir);
PseudoLabelBank read_bank(const std::filesystem::path& dir);

}  // namespace lqrppg
