#include "lqrppg/datagen.hpp"

#include "lqrppg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <set>

namespace lqrppg {

namespace fs = std::filesystem;
using io::json;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Float32 round trip so that in-memory corpora equal their on-disk form.
Vec to_f32_precision(const Vec& x) { return x.cast<float>().cast<double>(); }

ClipTensor slice_frames(const ClipTensor& video, int first, int count) {
  ClipTensor out(video.channels, count, video.height, video.width, video.fs);
  const Eigen::Index plane = static_cast<Eigen::Index>(video.height) * video.width;
  for (int c = 0; c < video.channels; ++c) {
    out.pixels.segment(out.index(c, 0, 0, 0), plane * count) =
        video.pixels.segment(video.index(c, first, 0, 0), plane * count);
  }
  return out;
}

template <class F>
auto as_data_error(const fs::path& path, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed manifest (" + e.what() + ")");
  } catch (const InvalidArgument& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t salt) {
  return splitmix64(splitmix64(master) ^ splitmix64(salt + 0x632be59bd9b4e019ULL));
}

void GenConfig::validate() const {
  require(videos >= 1, "GenConfig: videos must be >= 1");
  require(frames >= 2 && clips_per_video >= 1, "GenConfig: frames >= 2 and clips_per_video >= 1 required");
  require(fs > 2.0 * kPulseBand.hi, "GenConfig: fs must exceed twice the pulse band");
  require(height >= 1 && width >= 1, "GenConfig: height and width must be positive");
  require(hr_lo < hr_hi, "GenConfig: hr range must be increasing");
  require(hr_lo >= 60.0 * kPulseBand.lo && hr_hi <= 60.0 * kPulseBand.hi,
          "GenConfig: hr range must lie within the pulse band (45-150 bpm)");
  require(hr_wander >= 0.0 && harmonic_amp >= 0.0 && label_noise_std >= 0.0 && amp_drift_std >= 0.0 &&
              pixel_noise_std >= 0.0 && illum_drift_std >= 0.0 && pulse_gain >= 0.0,
          "GenConfig: noise levels, gains and amplitudes must be >= 0");
  require(artifact_burst_prob >= 0.0 && artifact_burst_prob <= 1.0, "GenConfig: artifact_burst_prob must be in [0, 1]");
  double total = 0.0;
  for (double f : split_fractions) {
    require(f >= 0.0, "GenConfig: split fractions must be >= 0");
    total += f;
  }
  require(std::abs(total - 1.0) < 1e-9, "GenConfig: split fractions must sum to 1");
}

json to_json(const GenConfig& c) {
  return json{{"videos", c.videos},
              {"frames", c.frames},
              {"clips_per_video", c.clips_per_video},
              {"fs", c.fs},
              {"height", c.height},
              {"width", c.width},
              {"hr_range", {c.hr_lo, c.hr_hi}},
              {"hr_wander", c.hr_wander},
              {"harmonic_amp", c.harmonic_amp},
              {"label_noise_std", c.label_noise_std},
              {"artifact_burst_prob", c.artifact_burst_prob},
              {"amp_drift_std", c.amp_drift_std},
              {"pixel_noise_std", c.pixel_noise_std},
              {"illum_drift_std", c.illum_drift_std},
              {"pulse_weights", c.pulse_weights},
              {"pulse_gain", c.pulse_gain},
              {"skin_base", c.skin_base},
              {"split_fractions", c.split_fractions},
              {"seed", c.seed}};
}

GenConfig gen_config_from_json(const json& j) {
  GenConfig c;
  c.videos = j.at("videos").get<int>();
  c.frames = j.at("frames").get<int>();
  c.clips_per_video = j.at("clips_per_video").get<int>();
  c.fs = j.at("fs").get<double>();
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.hr_lo = j.at("hr_range").at(0).get<double>();
  c.hr_hi = j.at("hr_range").at(1).get<double>();
  c.hr_wander = j.at("hr_wander").get<double>();
  c.harmonic_amp = j.at("harmonic_amp").get<double>();
  c.label_noise_std = j.at("label_noise_std").get<double>();
  c.artifact_burst_prob = j.at("artifact_burst_prob").get<double>();
  c.amp_drift_std = j.at("amp_drift_std").get<double>();
  c.pixel_noise_std = j.at("pixel_noise_std").get<double>();
  c.illum_drift_std = j.at("illum_drift_std").get<double>();
  c.pulse_weights = j.at("pulse_weights").get<std::array<double, 3>>();
  c.pulse_gain = j.at("pulse_gain").get<double>();
  c.skin_base = j.at("skin_base").get<std::array<double, 3>>();
  c.split_fractions = j.at("split_fractions").get<std::array<double, 3>>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// ---------------------------------------------------------------------------

Vec gen_hr_profile(const GenConfig& cfg, int frames, Rng& rng) {
  require(frames >= 1, "gen_hr_profile: frames must be >= 1");
  const double wander = std::min(cfg.hr_wander, 0.5 * (cfg.hr_hi - cfg.hr_lo));
  const double base = uniform(rng, cfg.hr_lo + wander, cfg.hr_hi - wander);
  const double period = uniform(rng, 30.0, 60.0);  // seconds
  const double phase = uniform(rng, 0.0, kTwoPi);
  Vec hr(frames);
  for (int t = 0; t < frames; ++t) hr[t] = base + wander * std::sin(kTwoPi * t / (cfg.fs * period) + phase);
  return hr.cwiseMax(cfg.hr_lo).cwiseMin(cfg.hr_hi);
}

PulseSample gen_pulse(const GenConfig& cfg, const Vec& hr_profile, Rng& rng) {
  const Eigen::Index T = hr_profile.size();
  require(T >= 2, "gen_pulse: profile needs at least 2 frames");
  require(hr_profile.allFinite() && hr_profile.minCoeff() >= cfg.hr_lo - 1e-9 &&
              hr_profile.maxCoeff() <= cfg.hr_hi + 1e-9,
          "gen_pulse: hr profile leaves the configured hr range");

  // Independent streams: the clean pulse does not depend on the noise knobs.
  Rng clean_rng(rng());
  Rng noise_rng(rng());

  const double phi2 = uniform(clean_rng, 0.0, kTwoPi);
  double phi = uniform(clean_rng, 0.0, kTwoPi);
  double log_amp = 0.0;
  std::normal_distribution<double> amp_step(0.0, 1.0);
  const double amp_sd = cfg.amp_drift_std / std::sqrt(cfg.fs);

  PulseSample out;
  out.hr_profile = hr_profile;
  out.clean.resize(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    out.clean[t] = std::exp(log_amp) * (std::sin(phi) + cfg.harmonic_amp * std::sin(2.0 * phi + phi2));
    phi += kTwoPi * (hr_profile[t] / 60.0) / cfg.fs;
    log_amp += amp_sd * amp_step(clean_rng);
  }

  out.label = out.clean;
  if (cfg.label_noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.label_noise_std);
    for (Eigen::Index t = 0; t < T; ++t) out.label[t] += noise(noise_rng);
  }
  if (cfg.artifact_burst_prob > 0.0) {
    // Per one-second block: a Hann-shaped spike of 0.1-0.5 s and amplitude 2-5.
    const int block = std::max(1, static_cast<int>(std::lround(cfg.fs)));
    for (Eigen::Index start = 0; start < T; start += block) {
      if (uniform(noise_rng, 0.0, 1.0) >= cfg.artifact_burst_prob) continue;
      const int len = std::max(2, static_cast<int>(std::lround(uniform(noise_rng, 0.1, 0.5) * cfg.fs)));
      const Eigen::Index at = start + static_cast<Eigen::Index>(uniform(noise_rng, 0.0, block));
      const double amp = uniform(noise_rng, 2.0, 5.0) * (uniform(noise_rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0);
      for (int i = 0; i < len && at + i < T; ++i) {
        out.label[at + i] += amp * 0.5 * (1.0 - std::cos(kTwoPi * (i + 0.5) / len));
      }
    }
  }
  return out;
}

Eigen::ArrayXf skin_mask(int height, int width) {
  const double cy = 0.5 * (height - 1);
  const double cx = 0.5 * (width - 1);
  const double sigma = 0.25 * std::min(height, width);
  Eigen::ArrayXf mask(static_cast<Eigen::Index>(height) * width);
  for (int h = 0; h < height; ++h) {
    for (int w = 0; w < width; ++w) {
      const double r2 = (h - cy) * (h - cy) + (w - cx) * (w - cx);
      mask[h * width + w] = static_cast<float>(std::exp(-r2 / (2.0 * sigma * sigma)));
    }
  }
  return mask;
}

ClipTensor gen_clip(const Vec& clean, const GenConfig& cfg, Rng& rng) {
  const int T = static_cast<int>(clean.size());
  require(T >= 1 && clean.allFinite(), "gen_clip: pulse must be finite and non-empty");
  ClipTensor clip(3, T, cfg.height, cfg.width, cfg.fs);
  const Eigen::ArrayXf mask = skin_mask(cfg.height, cfg.width);
  const Eigen::Index plane = mask.size();

  Rng illum_rng(rng());
  Rng pixel_rng(rng());
  Vec illum = Vec::Zero(T);
  if (cfg.illum_drift_std > 0.0) {
    std::normal_distribution<double> step(0.0, cfg.illum_drift_std / std::sqrt(cfg.fs));
    for (int t = 1; t < T; ++t) illum[t] = illum[t - 1] + step(illum_rng);
  }
  std::normal_distribution<float> noise(0.0f, static_cast<float>(cfg.pixel_noise_std));

  for (int c = 0; c < 3; ++c) {
    const double amp = cfg.pulse_weights[c] * cfg.pulse_gain;
    for (int t = 0; t < T; ++t) {
      auto px = clip.pixels.segment(clip.index(c, t, 0, 0), plane);
      px = static_cast<float>(cfg.skin_base[c] + illum[t]) + mask * static_cast<float>(amp * clean[t]);
      if (cfg.pixel_noise_std > 0.0) {
        for (Eigen::Index i = 0; i < plane; ++i) px[i] += noise(pixel_rng);
      }
    }
  }
  clip.pixels = clip.pixels.max(0.0f).min(255.0f);
  return clip;
}

// ---------------------------------------------------------------------------

ClipTensor resize_bilinear(const ClipTensor& clip, int height, int width) {
  require(height >= 1 && width >= 1, "resize_bilinear: target size must be positive");
  if (height == clip.height && width == clip.width) return clip;
  ClipTensor out(clip.channels, clip.frames, height, width, clip.fs);

  struct Tap {
    int i0, i1;
    float w1;
  };
  auto taps = [](int in, int n) {
    std::vector<Tap> t(n);
    const double scale = static_cast<double>(in) / n;
    for (int o = 0; o < n; ++o) {
      const double src = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, static_cast<float>(src - i0)};
    }
    return t;
  };
  const auto ty = taps(clip.height, height);
  const auto tx = taps(clip.width, width);

  for (int c = 0; c < clip.channels; ++c) {
    for (int t = 0; t < clip.frames; ++t) {
      for (int h = 0; h < height; ++h) {
        const auto& y = ty[h];
        for (int w = 0; w < width; ++w) {
          const auto& x = tx[w];
          const float top = clip.at(c, t, y.i0, x.i0) * (1 - x.w1) + clip.at(c, t, y.i0, x.i1) * x.w1;
          const float bot = clip.at(c, t, y.i1, x.i0) * (1 - x.w1) + clip.at(c, t, y.i1, x.i1) * x.w1;
          out.at(c, t, h, w) = top * (1 - y.w1) + bot * y.w1;
        }
      }
    }
  }
  return out;
}

std::vector<ClipPair> preprocess_clip(const ClipTensor& video, const Vec& label, const PreprocessConfig& cfg) {
  require(cfg.frames >= 2 && cfg.height >= 1 && cfg.width >= 1, "preprocess_clip: bad target shape");
  const long mismatch = std::labs(static_cast<long>(video.frames) - static_cast<long>(label.size()));
  if (mismatch > 1) {
    throw DataError("preprocess_clip: label has " + std::to_string(label.size()) + " samples for " +
                    std::to_string(video.frames) + " frames");
  }
  if (!video.pixels.allFinite() || !label.allFinite()) throw DataError("preprocess_clip: non-finite input");
  const int usable = std::min(video.frames, static_cast<int>(label.size()));
  std::vector<ClipPair> out;
  for (int first = 0; first + cfg.frames <= usable; first += cfg.frames) {
    ClipPair pair{resize_bilinear(slice_frames(video, first, cfg.frames), cfg.height, cfg.width),
                  zscore(Vec(label.segment(first, cfg.frames)))};
    out.push_back(std::move(pair));
  }
  return out;
}

void write_video(const ClipTensor& video, const fs::path& stem) {
  io::write_f32(fs::path(stem).concat(".f32"), {video.pixels.data(), static_cast<std::size_t>(video.pixels.size())});
  io::write_json(fs::path(stem).concat(".json"), json{{"version", kCorpusFormatVersion},
                                                      {"channels", video.channels},
                                                      {"frames", video.frames},
                                                      {"height", video.height},
                                                      {"width", video.width},
                                                      {"fs", video.fs}});
}

ClipTensor read_video(const fs::path& stem) {
  const fs::path meta_path = fs::path(stem).concat(".json");
  const json meta = io::read_json(meta_path);
  return as_data_error(meta_path, [&] {
    if (meta.at("version").get<int>() != kCorpusFormatVersion) {
      throw DataError(meta_path.string() + ": unsupported version");
    }
    ClipTensor v(meta.at("channels").get<int>(), meta.at("frames").get<int>(), meta.at("height").get<int>(),
                 meta.at("width").get<int>(), meta.at("fs").get<double>());
    const auto px = io::read_f32(fs::path(stem).concat(".f32"), static_cast<std::size_t>(v.pixels.size()));
    v.pixels = Eigen::Map<const Eigen::ArrayXf>(px.data(), static_cast<Eigen::Index>(px.size()));
    return v;
  });
}

std::vector<ClipPair> preprocess_clip(const fs::path& video_file, const fs::path& label_file,
                                      const PreprocessConfig& cfg) {
  const ClipTensor video = read_video(video_file);
  const auto bytes = io::read_bytes(label_file);
  if (bytes.size() % sizeof(float) != 0) throw DataError(label_file.string() + ": truncated float32 label");
  const auto raw = io::read_f32(label_file, bytes.size() / sizeof(float));
  Vec label = Eigen::Map<const Eigen::VectorXf>(raw.data(), static_cast<Eigen::Index>(raw.size())).cast<double>();
  return preprocess_clip(video, label, cfg);
}

// ---------------------------------------------------------------------------

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw InvalidArgument("unknown split '" + s + "'");
}

std::vector<const ClipRecord*> Corpus::split(Split s) const {
  std::vector<const ClipRecord*> out;
  for (const auto& c : clips) {
    if (c.split == s) out.push_back(&c);
  }
  return out;
}

std::vector<int> Corpus::video_ids(Split s) const {
  std::set<int> ids;
  for (const auto& c : clips) {
    if (c.split == s) ids.insert(c.video);
  }
  return {ids.begin(), ids.end()};
}

namespace {

Split split_of(const GenConfig& cfg, int video) {
  const int n_train = static_cast<int>(std::lround(cfg.split_fractions[0] * cfg.videos));
  const int n_val = static_cast<int>(std::lround(cfg.split_fractions[1] * cfg.videos));
  if (video < n_train) return Split::train;
  if (video < n_train + n_val) return Split::val;
  return Split::test;
}

Corpus generate(const GenConfig& cfg, bool pixels) {
  cfg.validate();
  Corpus corpus;
  corpus.cfg = cfg;
  const int total = cfg.video_frames();
  for (int v = 0; v < cfg.videos; ++v) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(v)));
    const Vec hr = gen_hr_profile(cfg, total, rng);
    const PulseSample pulse = gen_pulse(cfg, hr, rng);
    ClipTensor video;
    if (pixels) {
      Rng pixel_rng(derive_seed(cfg.seed, (std::uint64_t{1} << 32) + static_cast<std::uint64_t>(v)));
      video = gen_clip(pulse.clean, cfg, pixel_rng);
    }
    for (int k = 0; k < cfg.clips_per_video; ++k) {
      const int first = k * cfg.frames;
      ClipRecord rec;
      rec.video = v;
      rec.index = k;
      rec.split = split_of(cfg, v);
      if (pixels) rec.clip = slice_frames(video, first, cfg.frames);
      rec.label = to_f32_precision(zscore(Vec(pulse.label.segment(first, cfg.frames))));
      rec.clean = to_f32_precision(pulse.clean.segment(first, cfg.frames));
      rec.hr = hr.segment(first, cfg.frames).mean();
      corpus.clips.push_back(std::move(rec));
    }
  }
  return corpus;
}

std::string clip_stem(const ClipRecord& c) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "v%05d_c%02d", c.video, c.index);
  return buf;
}

std::span<const float> f32_span(const std::vector<float>& v) { return {v.data(), v.size()}; }

std::vector<float> to_f32(const Vec& x) {
  std::vector<float> out(static_cast<std::size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(x[i]);
  return out;
}

Vec from_f32(const std::vector<float>& x) {
  return Eigen::Map<const Eigen::VectorXf>(x.data(), static_cast<Eigen::Index>(x.size())).cast<double>();
}

}  // namespace

Corpus generate_corpus(const GenConfig& cfg) { return generate(cfg, true); }
Corpus generate_label_corpus(const GenConfig& cfg) { return generate(cfg, false); }

void check_split_disjoint(const Corpus& corpus) {
  std::map<int, Split> owner;
  for (const auto& c : corpus.clips) {
    auto [it, inserted] = owner.emplace(c.video, c.split);
    if (!inserted && it->second != c.split) {
      throw DataError("corpus: video " + std::to_string(c.video) + " appears in both " + to_string(it->second) +
                      " and " + to_string(c.split));
    }
  }
}

void write_corpus(const Corpus& corpus, const fs::path& dir) {
  check_split_disjoint(corpus);
  require(!corpus.clips.empty(), "write_corpus: empty corpus");
  const bool pixels = corpus.clips.front().clip.pixels.size() > 0;
  fs::create_directories(dir / "clips");

  json clips = json::array();
  for (const auto& c : corpus.clips) {
    require(c.label.size() == corpus.cfg.frames && c.clean.size() == corpus.cfg.frames,
            "write_corpus: clip length differs from cfg.frames");
    const std::string stem = clip_stem(c);
    if (pixels) {
      require(c.clip.pixels.size() ==
                  static_cast<Eigen::Index>(3) * corpus.cfg.frames * corpus.cfg.height * corpus.cfg.width,
              "write_corpus: pixel array does not match the configured shape");
      io::write_f32(dir / "clips" / (stem + ".pixels.f32"),
                    {c.clip.pixels.data(), static_cast<std::size_t>(c.clip.pixels.size())});
    }
    io::write_f32(dir / "clips" / (stem + ".label.f32"), f32_span(to_f32(c.label)));
    io::write_f32(dir / "clips" / (stem + ".clean.f32"), f32_span(to_f32(c.clean)));
    clips.push_back({{"video", c.video}, {"index", c.index}, {"split", to_string(c.split)}, {"hr", c.hr}, {"stem", stem}});
  }

  json splits;
  for (Split s : {Split::train, Split::val, Split::test}) splits[to_string(s)] = corpus.video_ids(s);
  io::write_json(dir / "manifest.json", json{{"version", kCorpusFormatVersion},
                                             {"fs", corpus.cfg.fs},
                                             {"shapes",
                                              {{"channels", 3},
                                               {"frames", corpus.cfg.frames},
                                               {"height", corpus.cfg.height},
                                               {"width", corpus.cfg.width}}},
                                             {"pixels", pixels},
                                             {"splits", splits},
                                             {"generator", to_json(corpus.cfg)},
                                             {"seed", corpus.cfg.seed},
                                             {"clips", clips}});
}

Corpus read_corpus(const fs::path& dir, bool with_pixels) {
  const fs::path manifest_path = dir / "manifest.json";
  const json m = io::read_json(manifest_path);
  Corpus corpus = as_data_error(manifest_path, [&] {
    const int version = m.at("version").get<int>();
    if (version != kCorpusFormatVersion) {
      throw DataError(manifest_path.string() + ": corpus version " + std::to_string(version) + ", expected " +
                      std::to_string(kCorpusFormatVersion));
    }
    Corpus c;
    c.cfg = gen_config_from_json(m.at("generator"));
    const bool stored_pixels = m.at("pixels").get<bool>();
    const int T = m.at("shapes").at("frames").get<int>();
    const int H = m.at("shapes").at("height").get<int>();
    const int W = m.at("shapes").at("width").get<int>();
    const double rate = m.at("fs").get<double>();
    for (const auto& e : m.at("clips")) {
      ClipRecord rec;
      rec.video = e.at("video").get<int>();
      rec.index = e.at("index").get<int>();
      rec.split = split_from_string(e.at("split").get<std::string>());
      rec.hr = e.at("hr").get<double>();
      const std::string stem = e.at("stem").get<std::string>();
      if (with_pixels && stored_pixels) {
        rec.clip = ClipTensor(3, T, H, W, rate);
        const auto px = io::read_f32(dir / "clips" / (stem + ".pixels.f32"), static_cast<std::size_t>(rec.clip.pixels.size()));
        rec.clip.pixels = Eigen::Map<const Eigen::ArrayXf>(px.data(), static_cast<Eigen::Index>(px.size()));
      }
      rec.label = from_f32(io::read_f32(dir / "clips" / (stem + ".label.f32"), static_cast<std::size_t>(T)));
      rec.clean = from_f32(io::read_f32(dir / "clips" / (stem + ".clean.f32"), static_cast<std::size_t>(T)));
      if (!rec.label.allFinite() || !rec.clean.allFinite() || (rec.clip.pixels.size() > 0 && !rec.clip.pixels.allFinite())) {
        throw DataError((dir / "clips" / stem).string() + ": non-finite samples");
      }
      c.clips.push_back(std::move(rec));
    }
    for (const auto& [name, ids] : m.at("splits").items()) {
      const Split s = split_from_string(name);
      for (int id : ids.get<std::vector<int>>()) {
        for (const auto& rec : c.clips) {
          if (rec.video == id && rec.split != s) {
            throw DataError(manifest_path.string() + ": split lists disagree for video " + std::to_string(id));
          }
        }
      }
    }
    return c;
  });
  check_split_disjoint(corpus);
  return corpus;
}

}  // namespace lqrppg
