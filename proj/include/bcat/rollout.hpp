#pragma once

// Autoregressive inference.
//
// The input window is conformed to the model grid and normalized with its own
// statistics once. Generated frames stay in normalized token space and are fed
// straight back; only the returned frames are denormalized.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "bcat/dataio.hpp"
#include "bcat/error.hpp"
#include "bcat/metrics.hpp"
#include "bcat/model.hpp"
#include "bcat/tensor.hpp"
#include "bcat/tokenizer.hpp"

namespace bcat {

struct RolloutReport {
  Trajectory predicted;  // [T][R][R][C], denormalized, on the model grid
  std::size_t model_calls = 0;
  double wall_time_ms = 0.0;
  std::size_t peak_scratch_bytes = 0;
  bool truncated = false;  // a non-finite prediction stopped generation
  std::string diagnostic;
};

namespace detail {

struct RolloutContext {
  Trajectory window;  // conformed input frames (raw units)
  NormStats stats;
  std::vector<float> tokens;  // normalized input tokens
  std::vector<float> keep;    // per-feature 1 for valid channels
  std::size_t n = 0, pd = 0;
};

inline RolloutContext prepare_rollout(const ModelConfig& mc, const Trajectory& input, std::size_t frames_out) {
  if (input.frames == 0) throw DataError("rollout: input window is empty");
  input.validate();
  RolloutContext ctx;
  ctx.window = conform_trajectory(input, mc.resolution, mc.channels);
  ctx.n = mc.tokens_per_frame();
  ctx.pd = mc.patch_dim();
  if (mc.variant == Variant::kVitDirect) {
    if (input.frames != mc.input_frames)
      throw ShapeError("rollout: vit_direct expects exactly " + std::to_string(mc.input_frames) + " input frames, got " +
                       std::to_string(input.frames));
    if (frames_out > mc.input_frames)
      throw ShapeError("rollout: vit_direct predicts at most " + std::to_string(mc.input_frames) + " frames");
  } else if (input.frames + frames_out > mc.max_frames) {
    throw ShapeError("rollout: " + std::to_string(input.frames) + " input + " + std::to_string(frames_out) +
                     " output frames exceed the model budget of " + std::to_string(mc.max_frames));
  }
  ctx.stats = compute_norm_stats(ctx.window, ctx.window.frames);
  Trajectory norm = normalize(ctx.window, ctx.stats);
  ctx.tokens = patchify(norm.data, mc.grid()).tokens;
  ctx.keep = channel_weights(mc.grid(), ctx.window.valid_channels);
  return ctx;
}

// Copies rows [row, row + count) of a [1,S,pd] prediction, zeroing padded
// channels. Throws NumericError on a non-finite value.
inline void take_rows(const Tensor<float>& out, std::size_t row, std::size_t count, const std::vector<float>& keep,
                      std::vector<float>& dst) {
  const std::size_t pd = keep.size();
  const float* src = out.data().data() + row * pd;
  for (std::size_t i = 0; i < count * pd; ++i) {
    const float v = src[i];
    if (!std::isfinite(v)) throw NumericError("rollout: non-finite prediction");
    dst.push_back(keep[i % pd] != 0.0f ? v : 0.0f);
  }
}

inline Tensor<float> as_tokens(const std::vector<float>& flat, std::size_t begin_row, std::size_t end_row,
                               std::size_t pd) {
  return Tensor<float>::from({1, end_row - begin_row, pd},
                             std::vector<float>(flat.begin() + static_cast<std::ptrdiff_t>(begin_row * pd),
                                                flat.begin() + static_cast<std::ptrdiff_t>(end_row * pd)));
}

inline Trajectory finish_frames(const ModelConfig& mc, const RolloutContext& ctx, const std::vector<float>& tokens) {
  const std::size_t frames = tokens.size() / (ctx.n * ctx.pd);
  Trajectory out = ctx.window;
  out.frames = frames;
  out.data = frames ? depatchify(std::span<const float>(tokens.data(), frames * ctx.n * ctx.pd), mc.grid())
                    : std::vector<float>{};
  denormalize_in_place(out.data, out.channels, ctx.stats);
  out.meta = nlohmann::json::object();
  return out;
}

class RolloutTimer {
 public:
  RolloutTimer() : base_(scratch_live_bytes()), start_(std::chrono::steady_clock::now()) { reset_scratch_peak(); }
  void stop(RolloutReport& r) const {
    r.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    r.peak_scratch_bytes = scratch_peak_bytes() - std::min(base_, scratch_peak_bytes());
  }

 private:
  std::size_t base_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

/// One frame per model call (bcat and time_then_space).
inline RolloutReport rollout_next_frame(const ModelParams<float>& params, const Trajectory& input, std::size_t frames_out,
                                        bool use_cache = true) {
  const auto& mc = params.config;
  if (mc.variant != Variant::kBcat && mc.variant != Variant::kTimeThenSpace)
    throw ConfigError("rollout_next_frame: variant " + to_string(mc.variant) + " is not frame-aligned");
  NoGradGuard no_grad;
  detail::RolloutTimer timer;
  auto ctx = detail::prepare_rollout(mc, input, frames_out);
  const std::size_t n = ctx.n, pd = ctx.pd;
  RolloutReport report;
  std::vector<float> seq = ctx.tokens;  // grows by one frame per call
  std::vector<float> generated;
  KVCache<float> cache;
  try {
    for (std::size_t step = 0; step < frames_out; ++step) {
      const std::size_t len = seq.size() / pd;
      Tensor<float> out;
      if (use_cache) {
        const std::size_t begin = step == 0 ? 0 : len - n;
        out = forward(params, detail::as_tokens(seq, begin, len, pd), &cache);
      } else {
        out = forward(params, detail::as_tokens(seq, 0, len, pd));
      }
      ++report.model_calls;
      std::vector<float> next;
      detail::take_rows(out, out.dim(1) - n, n, ctx.keep, next);
      seq.insert(seq.end(), next.begin(), next.end());
      generated.insert(generated.end(), next.begin(), next.end());
    }
  } catch (const NumericError& e) {
    report.truncated = true;
    report.diagnostic = e.what();
  }
  report.predicted = detail::finish_frames(mc, ctx, generated);
  timer.stop(report);
  return report;
}

/// One token per model call, raster order (next_token variant).
inline RolloutReport rollout_next_token(const ModelParams<float>& params, const Trajectory& input, std::size_t frames_out,
                                        bool use_cache = true) {
  const auto& mc = params.config;
  if (mc.variant != Variant::kNextToken)
    throw ConfigError("rollout_next_token: variant " + to_string(mc.variant) + " is not token-aligned");
  NoGradGuard no_grad;
  detail::RolloutTimer timer;
  auto ctx = detail::prepare_rollout(mc, input, frames_out);
  const std::size_t pd = ctx.pd;
  RolloutReport report;
  std::vector<float> seq = ctx.tokens;
  std::vector<float> generated;
  KVCache<float> cache;
  try {
    for (std::size_t step = 0; step < frames_out * ctx.n; ++step) {
      const std::size_t len = seq.size() / pd;
      Tensor<float> out;
      if (use_cache) {
        const std::size_t begin = step == 0 ? 0 : len - 1;
        out = forward(params, detail::as_tokens(seq, begin, len, pd), &cache);
      } else {
        out = forward(params, detail::as_tokens(seq, 0, len, pd));
      }
      ++report.model_calls;
      std::vector<float> next;
      detail::take_rows(out, out.dim(1) - 1, 1, ctx.keep, next);
      seq.insert(seq.end(), next.begin(), next.end());
      generated.insert(generated.end(), next.begin(), next.end());
    }
  } catch (const NumericError& e) {
    report.truncated = true;
    report.diagnostic = e.what();
  }
  // A partially generated frame is dropped.
  generated.resize(generated.size() / (ctx.n * pd) * ctx.n * pd);
  report.predicted = detail::finish_frames(mc, ctx, generated);
  timer.stop(report);
  return report;
}

/// All output frames from a single call (vit_direct).
inline RolloutReport rollout_direct(const ModelParams<float>& params, const Trajectory& input, std::size_t frames_out) {
  const auto& mc = params.config;
  if (mc.variant != Variant::kVitDirect) throw ConfigError("rollout_direct: variant is " + to_string(mc.variant));
  NoGradGuard no_grad;
  detail::RolloutTimer timer;
  auto ctx = detail::prepare_rollout(mc, input, frames_out);
  RolloutReport report;
  std::vector<float> generated;
  if (frames_out > 0) {
    try {
      const Tensor<float> out = forward(params, detail::as_tokens(ctx.tokens, 0, ctx.tokens.size() / ctx.pd, ctx.pd));
      ++report.model_calls;
      detail::take_rows(out, 0, frames_out * ctx.n, ctx.keep, generated);
    } catch (const NumericError& e) {
      report.truncated = true;
      report.diagnostic = e.what();
      generated.clear();
    }
  }
  report.predicted = detail::finish_frames(mc, ctx, generated);
  timer.stop(report);
  return report;
}

/// Dispatches on the model variant. The cache flag is ignored by vit_direct.
inline RolloutReport rollout(const ModelParams<float>& params, const Trajectory& input, std::size_t frames_out,
                             bool use_cache = true) {
  switch (params.config.variant) {
    case Variant::kBcat:
    case Variant::kTimeThenSpace:
      return rollout_next_frame(params, input, frames_out, use_cache);
    case Variant::kNextToken:
      return rollout_next_token(params, input, frames_out, use_cache);
    case Variant::kVitDirect:
      return rollout_direct(params, input, frames_out);
  }
  throw ConfigError("rollout: unknown variant");
}

/// Truth frames [input_frames, input_frames + frames_out) on the model grid.
inline Trajectory target_frames(const ModelConfig& mc, const Trajectory& traj, std::size_t input_frames,
                                std::size_t frames_out) {
  if (input_frames + frames_out > traj.frames)
    throw DataError("trajectory has " + std::to_string(traj.frames) + " frames, needs " +
                    std::to_string(input_frames + frames_out));
  return conform_trajectory(traj.slice_frames(input_frames, input_frames + frames_out), mc.resolution, mc.channels);
}

/// Relative L2 error of each one-step prediction made from ground truth
/// history, for frames [input_frames, input_frames + frames_out). One forward
/// call over the true sequence, no autoregression.
inline std::vector<double> teacher_forced_next_error(const ModelParams<float>& params, const Trajectory& traj,
                                                     std::size_t input_frames, std::size_t frames_out) {
  const auto& mc = params.config;
  if (input_frames == 0 || frames_out == 0) throw ShapeError("teacher_forced_next_error: empty window");
  const Trajectory truth = target_frames(mc, traj, input_frames, frames_out);
  if (mc.variant == Variant::kVitDirect) {
    const auto r = rollout_direct(params, traj.slice_frames(0, input_frames), frames_out);
    return frame_relative_l2(r.predicted.data, truth.data, frames_out, truth.channels, truth.valid_channels);
  }
  const std::size_t total = input_frames + frames_out;
  if (total > mc.max_frames)
    throw ShapeError("teacher_forced_next_error: " + std::to_string(total) + " frames exceed the model budget of " +
                     std::to_string(mc.max_frames));
  NoGradGuard no_grad;
  Trajectory window = conform_trajectory(traj.slice_frames(0, total), mc.resolution, mc.channels);
  const NormStats stats = compute_norm_stats(window, input_frames);
  normalize_in_place(window.data, window.channels, stats);
  const auto tokens = patchify(window.data, mc.grid()).tokens;
  const std::size_t n = mc.tokens_per_frame(), pd = mc.patch_dim();
  const auto keep = channel_weights(mc.grid(), window.valid_channels);
  const std::size_t shift = mc.variant == Variant::kNextToken ? 1 : n;
  const Tensor<float> out = forward(params, detail::as_tokens(tokens, 0, total * n - shift, pd));
  std::vector<float> pred;
  detail::take_rows(out, input_frames * n - shift, frames_out * n, keep, pred);
  std::vector<float> frames = depatchify(pred, mc.grid());
  denormalize_in_place(frames, window.channels, stats);
  return frame_relative_l2(frames, truth.data, frames_out, truth.channels, truth.valid_channels);
}

// ---------------------------------------------------------------------------
// Timing

struct ResourceStats {
  std::vector<double> runs_ms;  // timed repeats, warmup excluded
  double median_ms = 0.0;
  double mean_ms = 0.0;
  std::size_t model_calls = 0;
  std::size_t peak_scratch_bytes = 0;
  bool deterministic = true;  // every repeat produced identical frames
};

/// Runs `warmup` untimed rollouts, then `repeats` timed ones.
inline ResourceStats measure_resources(const ModelParams<float>& params, const Trajectory& input, std::size_t frames_out,
                                       std::size_t repeats, std::size_t warmup, bool use_cache = true) {
  if (repeats == 0) throw ConfigError("repeats: must be >= 1");
  std::vector<float> reference;
  ResourceStats stats;
  for (std::size_t i = 0; i < warmup; ++i) reference = rollout(params, input, frames_out, use_cache).predicted.data;
  for (std::size_t i = 0; i < repeats; ++i) {
    RolloutReport r = rollout(params, input, frames_out, use_cache);
    stats.runs_ms.push_back(r.wall_time_ms);
    stats.model_calls = r.model_calls;
    stats.peak_scratch_bytes = std::max(stats.peak_scratch_bytes, r.peak_scratch_bytes);
    if (i == 0 && warmup == 0) reference = r.predicted.data;
    if (r.predicted.data != reference) stats.deterministic = false;
  }
  std::vector<double> sorted = stats.runs_ms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  stats.median_ms = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  stats.mean_ms = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(m);
  return stats;
}

}  // namespace bcat
