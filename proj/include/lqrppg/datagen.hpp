#pragma once

// Synthetic paired pulse / video corpus, the clip preprocessing pipeline and
// the on-disk corpus format.
//
// The video carries the clean pulse; label noise and artifact bursts afflict
// only the stored label.

#include "lqrppg/clip.hpp"
#include "lqrppg/io.hpp"
#include "lqrppg/rng.hpp"
#include "lqrppg/signal.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace lqrppg {

struct GenConfig {
  int videos = 100;
  int frames = 160;  // per clip
  int clips_per_video = 2;
  double fs = 30.0;
  int height = 32;
  int width = 32;
  double hr_lo = 55.0;  // bpm
  double hr_hi = 130.0;
  double hr_wander = 1.5;  // bpm amplitude of the slow within-video HR variation
  double harmonic_amp = 0.35;
  double label_noise_std = 0.0;
  double artifact_burst_prob = 0.0;  // per second of label
  double amp_drift_std = 0.0;        // log-amplitude random walk, per sqrt(second)
  double pixel_noise_std = 0.0;
  double illum_drift_std = 0.0;  // pixel units per sqrt(second)
  std::array<double, 3> pulse_weights{0.3, 1.0, 0.5};
  double pulse_gain = 1.0;
  std::array<double, 3> skin_base{180.0, 130.0, 110.0};
  std::array<double, 3> split_fractions{0.64, 0.16, 0.20};  // train / val / test
  std::uint64_t seed = 0;

  int video_frames() const { return frames * clips_per_video; }
  /// Throws InvalidArgument (bad ranges, hrRange outside the pulse band, ...).
  void validate() const;
};

io::json to_json(const GenConfig& cfg);
GenConfig gen_config_from_json(const io::json& j);

struct PulseSample {
  Vec clean;       // a(t) [sin phi + h sin(2 phi + phi2)]
  Vec label;       // clean + noise + bursts
  Vec hr_profile;  // bpm per frame
};

/// Slowly varying HR curve (bpm per frame) for one video, clamped to hrRange.
Vec gen_hr_profile(const GenConfig& cfg, int frames, Rng& rng);

/// Pulse and label for an HR profile. Throws InvalidArgument when the profile
/// leaves [hr_lo, hr_hi].
PulseSample gen_pulse(const GenConfig& cfg, const Vec& hr_profile, Rng& rng);

/// pixel(c,t,h,w) = skin_c + mask(h,w) w_c gain clean(t) + illum(t) + noise,
/// clipped to [0, 255]. mask is a centered Gaussian bump with peak 1.
ClipTensor gen_clip(const Vec& clean, const GenConfig& cfg, Rng& rng);

/// Centered Gaussian bump (H*W, row-major) used by gen_clip.
Eigen::ArrayXf skin_mask(int height, int width);

// ---------------------------------------------------------------------------

struct PreprocessConfig {
  int frames = 160;
  int height = 128;
  int width = 128;
};

struct ClipPair {
  ClipTensor clip;
  Vec label;  // z-scored per clip
};

/// Non-overlapping `frames`-long segments, bilinear resize, per-clip z-scored
/// label; the trailing partial segment is dropped. A label/video length
/// mismatch of one frame is trimmed, larger mismatches are rejected.
std::vector<ClipPair> preprocess_clip(const ClipTensor& video, const Vec& label, const PreprocessConfig& cfg);
std::vector<ClipPair> preprocess_clip(const std::filesystem::path& video_file, const std::filesystem::path& label_file,
                                      const PreprocessConfig& cfg);

/// Bilinear resize with half-pixel centers (edge-clamped).
ClipTensor resize_bilinear(const ClipTensor& clip, int height, int width);

/// Raw video file: <stem>.f32 pixels + <stem>.json {channels, frames, height, width, fs}.
void write_video(const ClipTensor& video, const std::filesystem::path& stem);
ClipTensor read_video(const std::filesystem::path& stem);

// ---------------------------------------------------------------------------

enum class Split { train, val, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ClipRecord {
  int video = 0;
  int index = 0;  // clip position within the video
  Split split = Split::train;
  ClipTensor clip;
  Vec label;  // z-scored per clip, float32-representable
  Vec clean;  // clean pulse over the clip, float32-representable
  double hr = 0.0;  // mean generator HR over the clip, bpm
};

struct Corpus {
  GenConfig cfg;
  std::vector<ClipRecord> clips;  // ordered by (video, index)

  std::vector<const ClipRecord*> split(Split s) const;
  std::vector<int> video_ids(Split s) const;
};

/// Generates every video with its own seed derived from (cfg.seed, video id).
/// Videos are assigned to splits in id order by cfg.split_fractions.
Corpus generate_corpus(const GenConfig& cfg);

/// Pulse-only variant (no pixels), e.g. for Stage-1 label corpora.
Corpus generate_label_corpus(const GenConfig& cfg);

inline constexpr int kCorpusFormatVersion = 1;

/// <dir>/manifest.json plus per-clip float32 files under <dir>/clips/.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
/// Throws DataError naming the path on version mismatch, missing or corrupt files.
Corpus read_corpus(const std::filesystem::path& dir, bool with_pixels = true);

/// Throws DataError when a video id appears in more than one split.
void check_split_disjoint(const Corpus& corpus);

}  // namespace lqrppg
