#pragma once

#include <Eigen/Core>

namespace lqrppg {

/// Video clip laid out channel-major: index ((c*T + t)*H + h)*W + w.
/// Pixel values live in [0, 255] and are stored as float32, the on-disk type.
struct ClipTensor {
  int channels = 0;
  int frames = 0;
  int height = 0;
  int width = 0;
  double fs = 30.0;
  Eigen::ArrayXf pixels;

  ClipTensor() = default;
  ClipTensor(int c, int t, int h, int w, double rate)
      : channels(c), frames(t), height(h), width(w), fs(rate),
        pixels(Eigen::ArrayXf::Zero(static_cast<Eigen::Index>(c) * t * h * w)) {}

  Eigen::Index index(int c, int t, int h, int w) const {
    return ((static_cast<Eigen::Index>(c) * frames + t) * height + h) * width + w;
  }
  float& at(int c, int t, int h, int w) { return pixels[index(c, t, h, w)]; }
  float at(int c, int t, int h, int w) const { return pixels[index(c, t, h, w)]; }

  /// Contiguous H*W plane of one channel at one frame.
  Eigen::Map<const Eigen::ArrayXf> frame(int c, int t) const {
    return {pixels.data() + index(c, t, 0, 0), static_cast<Eigen::Index>(height) * width};
  }
};

}  // namespace lqrppg
