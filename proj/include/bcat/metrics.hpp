#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "bcat/dataio.hpp"
#include "bcat/error.hpp"

namespace bcat {

inline constexpr double kRelL2Eps = 1e-7;

/// ||u - v|| / (||u|| + eps) for each frame, pooling every spatial point and
/// the leading `valid_channels` channels. Arrays are [T][points][channels].
inline std::vector<double> frame_relative_l2(std::span<const float> pred, std::span<const float> truth,
                                             std::size_t frames, std::size_t channels, std::size_t valid_channels,
                                             double eps = kRelL2Eps) {
  if (pred.size() != truth.size()) throw ShapeError("relative_l2: prediction and truth sizes differ");
  if (frames == 0 || channels == 0 || pred.size() % (frames * channels) != 0)
    throw ShapeError("relative_l2: arrays are not [T][...][C]");
  if (valid_channels > channels) throw ShapeError("relative_l2: valid channels exceed channels");
  const std::size_t per_frame = pred.size() / frames;
  std::vector<double> out(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    double diff = 0.0, norm = 0.0;
    for (std::size_t i = t * per_frame; i < (t + 1) * per_frame; ++i) {
      if (i % channels >= valid_channels) continue;
      const double d = static_cast<double>(pred[i]) - truth[i];
      diff += d * d;
      norm += static_cast<double>(truth[i]) * truth[i];
    }
    out[t] = std::sqrt(diff) / (std::sqrt(norm) + eps);
  }
  return out;
}

/// Time-averaged relative L2 error.
inline double relative_l2(std::span<const float> pred, std::span<const float> truth, std::size_t frames,
                          std::size_t channels, std::size_t valid_channels, double eps = kRelL2Eps) {
  const auto per = frame_relative_l2(pred, truth, frames, channels, valid_channels, eps);
  double acc = 0.0;
  for (double e : per) acc += e;
  return acc / static_cast<double>(frames);
}

inline double relative_l2(const Trajectory& pred, const Trajectory& truth, double eps = kRelL2Eps) {
  if (pred.frames != truth.frames || pred.height != truth.height || pred.width != truth.width ||
      pred.channels != truth.channels)
    throw ShapeError("relative_l2: trajectory shapes differ");
  return relative_l2(pred.data, truth.data, truth.frames, truth.channels, truth.valid_channels, eps);
}

}  // namespace bcat
