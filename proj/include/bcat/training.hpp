#pragma once

// Teacher-forced training: every supervised position of a trajectory is
// scored in one forward pass, with masked MSE in normalized space, AdamW
// (decoupled weight decay), global gradient clipping and a
// warmup-stable-decay learning-rate schedule.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "bcat/dataio.hpp"
#include "bcat/error.hpp"
#include "bcat/model.hpp"
#include "bcat/parallel.hpp"
#include "bcat/rng.hpp"
#include "bcat/tensor.hpp"
#include "bcat/tokenizer.hpp"

namespace bcat {

struct TrainConfig {
  double base_lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::size_t batch_size = 4;
  std::size_t steps = 2000;
  double warmup_frac = 0.05;
  double decay_frac = 0.10;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  std::size_t input_frames = 10;   // T0
  std::size_t output_frames = 10;  // T
  bool random_crop = false;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only

  void validate() const {
    if (steps < 1) throw ConfigError("steps: must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
    if (warmup_frac < 0 || decay_frac < 0 || warmup_frac + decay_frac > 1.0)
      throw ConfigError("warmup_frac/decay_frac: need non-negative fractions summing to <= 1");
    if (!(base_lr >= 0)) throw ConfigError("lr: must be >= 0");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay: must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta1/beta2: must be in [0, 1)");
    if (!(eps > 0)) throw ConfigError("eps: must be positive");
    if (!(grad_clip > 0)) throw ConfigError("grad_clip: must be positive");
    if (input_frames < 1) throw ConfigError("input_frames: must be >= 1");
    if (output_frames < 1) throw ConfigError("output_frames: must be >= 1");
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"lr", c.base_lr},           {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},          {"beta2", c.beta2},
          {"eps", c.eps},              {"batch_size", c.batch_size},
          {"steps", c.steps},          {"warmup_frac", c.warmup_frac},
          {"decay_frac", c.decay_frac}, {"grad_clip", c.grad_clip},
          {"seed", c.seed},            {"input_frames", c.input_frames},
          {"output_frames", c.output_frames}, {"random_crop", c.random_crop},
          {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& where = "train") {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    const std::string field = where + "." + key;
    try {
      if (key == "lr") c.base_lr = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "eps") c.eps = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "steps") c.steps = v.get<std::size_t>();
      else if (key == "warmup_frac") c.warmup_frac = v.get<double>();
      else if (key == "decay_frac") c.decay_frac = v.get<double>();
      else if (key == "grad_clip") c.grad_clip = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "input_frames") c.input_frames = v.get<std::size_t>();
      else if (key == "output_frames") c.output_frames = v.get<std::size_t>();
      else if (key == "random_crop") c.random_crop = v.get<bool>();
      else if (key == "checkpoint_every") c.checkpoint_every = v.get<std::size_t>();
      else throw ConfigError(field + ": unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(field + ": " + e.what());
    }
  }
  return c;
}

/// Warmup-stable-decay: linear 0 -> base over the first warmup_frac of the
/// steps, flat until (1 - decay_frac) * total, then linear down to 0.
inline double wsd_lr(std::size_t step, std::size_t total, const TrainConfig& cfg) {
  const double s = static_cast<double>(step), n = static_cast<double>(total);
  const double warm = cfg.warmup_frac * n;
  const double decay_start = (1.0 - cfg.decay_frac) * n;
  if (s < warm) return cfg.base_lr * s / warm;
  if (s < decay_start || cfg.decay_frac == 0.0) return cfg.base_lr;
  return cfg.base_lr * std::max(0.0, (n - s) / (n - decay_start));
}

// ---------------------------------------------------------------------------
// Examples and loss

/// One normalized, tokenized trajectory.
struct Example {
  std::vector<float> tokens;  // [frames * N][patch_dim]
  std::size_t frames = 0;
  std::size_t valid_channels = 0;
};

/// Conforms, truncates to at most `max_frames`, normalizes with stats of the
/// first `input_frames` frames, and patchifies.
inline Example make_example(const Trajectory& raw, const ModelConfig& mc, std::size_t input_frames,
                            std::size_t start = 0) {
  Trajectory traj = conform_trajectory(raw, mc.resolution, mc.channels);
  if (traj.frames < 2) throw DataError("trajectory: needs >= 2 frames");
  const std::size_t end = std::min(traj.frames, start + mc.max_frames);
  if (start != 0 || end != traj.frames) traj = traj.slice_frames(start, end);
  const auto stats = compute_norm_stats(traj, std::min(input_frames, traj.frames));
  normalize_in_place(traj.data, traj.channels, stats);
  Example ex;
  ex.tokens = patchify(traj.data, mc.grid()).tokens;
  ex.frames = traj.frames;
  ex.valid_channels = traj.valid_channels;
  return ex;
}

/// Model input, aligned targets and a 0/1 weight per target position.
struct TrainingPair {
  Tensor<float> input;              // [1, S_in, patch_dim]
  std::vector<float> target;        // [S_out * patch_dim]
  std::vector<std::uint8_t> valid;  // [S_out]; realized positions
  std::size_t outputs = 0;          // S_out: leading model outputs that are scored
};

inline TrainingPair make_training_pair(const Example& ex, const ModelConfig& mc) {
  const std::size_t n = mc.tokens_per_frame(), pd = mc.patch_dim();
  const std::size_t total = ex.frames * n;
  std::size_t in_begin = 0, in_end = 0, out_begin = 0, out_count = 0;
  switch (mc.variant) {
    case Variant::kBcat:
    case Variant::kTimeThenSpace:
      in_end = total - n;  // last frame only appears as a target
      out_begin = n;
      out_count = in_end;
      break;
    case Variant::kNextToken:
      in_end = total - 1;
      out_begin = 1;
      out_count = in_end;
      break;
    case Variant::kVitDirect: {
      const std::size_t t0 = mc.input_frames;
      if (ex.frames <= t0) throw DataError("vit_direct: trajectory has no frames after the input window");
      const std::size_t t = std::min(ex.frames - t0, t0);
      in_end = t0 * n;
      out_begin = t0 * n;
      out_count = t * n;
      break;
    }
  }
  TrainingPair pair;
  pair.input = Tensor<float>::from(
      {1, in_end - in_begin, pd},
      std::vector<float>(ex.tokens.begin() + static_cast<std::ptrdiff_t>(in_begin * pd),
                         ex.tokens.begin() + static_cast<std::ptrdiff_t>(in_end * pd)));
  pair.target.assign(ex.tokens.begin() + static_cast<std::ptrdiff_t>(out_begin * pd),
                     ex.tokens.begin() + static_cast<std::ptrdiff_t>((out_begin + out_count) * pd));
  pair.valid.assign(out_count, 1);
  pair.outputs = out_count;
  return pair;
}

/// Mean squared error over positions with position_mask != 0 and features
/// with feature_weight != 0. pred is [B,S,patch_dim]; target matches it.
template <typename T>
Tensor<T> next_frame_loss(const Tensor<T>& pred, const std::vector<T>& target,
                          const std::vector<std::uint8_t>& position_mask, const std::vector<T>& feature_weight) {
  const std::size_t pd = feature_weight.size();
  if (pred.size() != target.size() || pd == 0 || pred.size() % pd != 0 || pred.size() / pd != position_mask.size())
    throw ShapeError("next_frame_loss: pred " + shape_str(pred.shape()) + ", target " + std::to_string(target.size()) +
                     ", mask " + std::to_string(position_mask.size()) + ", features " + std::to_string(pd));
  std::vector<T> w(pred.size());
  double count = 0.0;
  for (std::size_t s = 0; s < position_mask.size(); ++s)
    for (std::size_t f = 0; f < pd; ++f) {
      const T v = position_mask[s] ? feature_weight[f] : T(0);
      w[s * pd + f] = v;
      count += static_cast<double>(v);
    }
  if (count == 0.0) throw DataError("next_frame_loss: nothing to supervise");
  // Masked targets are copied from pred so garbage never reaches the product.
  std::vector<T> tgt(target.size());
  for (std::size_t i = 0; i < tgt.size(); ++i) tgt[i] = w[i] != T(0) ? target[i] : T(0);
  const Tensor<T> wt = Tensor<T>::from(pred.shape(), std::move(w));
  const Tensor<T> diff = mul(sub(pred, Tensor<T>::from(pred.shape(), std::move(tgt))), wt);
  return scale(sum(mul(diff, diff)), 1.0 / count);
}

/// Loss of one example under teacher forcing (a fresh graph).
template <typename T>
Tensor<T> example_loss(const ModelParams<T>& params, const TrainingPair& pair, std::size_t valid_channels) {
  const auto& mc = params.config;
  Tensor<T> input;
  std::vector<T> target(pair.target.begin(), pair.target.end());
  if constexpr (std::is_same_v<T, float>) {
    input = pair.input;
  } else {
    input = Tensor<T>::from(pair.input.shape(), std::vector<T>(pair.input.vec().begin(), pair.input.vec().end()));
  }
  Tensor<T> pred = forward(params, input);
  if (pred.dim(1) != pair.outputs) pred = slice(pred, 1, 0, pair.outputs);
  const auto fw = channel_weights(mc.grid(), valid_channels);
  return next_frame_loss(pred, target, pair.valid, std::vector<T>(fw.begin(), fw.end()));
}

// ---------------------------------------------------------------------------
// Optimizer

struct OptState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

inline OptState make_opt_state(const ModelParams<float>& p) {
  OptState s;
  for (const auto& t : p.tensors()) {
    s.m.emplace_back(t.size(), 0.0);
    s.v.emplace_back(t.size(), 0.0);
  }
  return s;
}

inline double global_norm(const std::vector<std::vector<float>>& grads) {
  double acc = 0.0;
  for (const auto& g : grads)
    for (float x : g) acc += static_cast<double>(x) * x;
  return std::sqrt(acc);
}

/// Scales gradients so the global L2 norm is at most max_norm; returns the
/// norm before clipping.
inline double clip_gradients(std::vector<std::vector<float>>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (auto& x : g) x = static_cast<float>(x * s);
  }
  return norm;
}

/// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2; bias-corrected;
/// p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p), wd only on decaying params.
inline void adamw_step(const ModelParams<float>& params, const std::vector<std::vector<float>>& grads, OptState& state,
                       double lr, const TrainConfig& cfg) {
  std::vector<Tensor<float>> tensors;
  std::vector<bool> decays;
  std::vector<std::string> names;
  params.for_each([&](const std::string& name, const Tensor<float>& t, bool d) {
    tensors.push_back(t);
    decays.push_back(d);
    names.push_back(name);
  });
  if (grads.size() != tensors.size() || state.m.size() != tensors.size())
    throw ShapeError("adamw_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != tensors[i].size()) throw ShapeError("adamw_step: gradient shape mismatch for " + names[i]);
    for (float g : grads[i])
      if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient for " + names[i]);
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto p = tensors[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double wd = decays[i] ? cfg.weight_decay : 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i][j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double mh = m[j] / bc1, vh = v[j] / bc2;
      p[j] = static_cast<float>(p[j] - lr * (mh / (std::sqrt(vh) + cfg.eps) + wd * p[j]));
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  ModelParams<float> params;
  std::vector<double> losses;  // per step
  std::vector<double> lrs;
  double seconds = 0.0;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  std::function<void(std::size_t step, double lr, double loss)> on_step;
};

/// Averages per-example gradients (fixed order) for one batch; returns the
/// mean loss.
inline double batch_gradients(const ModelParams<float>& params, const std::vector<const TrainingPair*>& pairs,
                              const std::vector<std::size_t>& valid_channels,
                              std::vector<std::vector<float>>& grads_out) {
  const auto leaves = params.tensors();
  const std::size_t b = pairs.size();
  std::vector<std::vector<std::vector<float>>> per(b);
  std::vector<double> losses(b);
  parallel_for(b, [&](std::size_t i) {
    const Tensor<float> loss = example_loss(params, *pairs[i], valid_channels[i]);
    losses[i] = loss.item();
    const auto grads = backward(loss);
    per[i].reserve(leaves.size());
    for (const auto& leaf : leaves) per[i].push_back(grads.of(leaf));
  });
  grads_out.assign(leaves.size(), {});
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    std::vector<double> acc(leaves[k].size(), 0.0);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += per[i][k][j];
    grads_out[k].resize(acc.size());
    for (std::size_t j = 0; j < acc.size(); ++j) grads_out[k][j] = static_cast<float>(acc[j] / static_cast<double>(b));
  }
  double mean = 0.0;
  for (double l : losses) mean += l;
  return mean / static_cast<double>(b);
}

inline TrainResult train(const ModelConfig& mc, const TrainConfig& tc, const std::vector<Trajectory>& dataset,
                         const TrainOptions& opts = {}) {
  mc.validate();
  tc.validate();
  if (mc.variant == Variant::kVitDirect && mc.input_frames != tc.input_frames)
    throw ConfigError("input_frames: vit_direct model and training windows differ");
  if (dataset.empty()) throw DataError("train: dataset is empty");
  const auto t_start = std::chrono::steady_clock::now();

  Rng rng(tc.seed);
  TrainResult result{init_params<float>(mc, rng.next_u64()), {}, {}, 0.0};
  auto& params = result.params;
  OptState state = make_opt_state(params);

  // Without cropping every example is fixed; prepare once.
  std::vector<Example> examples;
  std::vector<TrainingPair> pairs;
  if (!tc.random_crop) {
    for (const auto& traj : dataset) {
      examples.push_back(make_example(traj, mc, tc.input_frames));
      pairs.push_back(make_training_pair(examples.back(), mc));
    }
  }

  std::ofstream metrics;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    metrics.open(opts.out_dir / "metrics.csv", std::ios::trunc);
    if (!metrics) throw DataError("cannot write " + (opts.out_dir / "metrics.csv").string());
    metrics << "step,lr,loss\n";
  }

  std::vector<std::size_t> order(dataset.size());
  std::size_t cursor = order.size();
  std::vector<std::vector<float>> grads;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    std::vector<std::size_t> batch;
    while (batch.size() < tc.batch_size) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    std::vector<TrainingPair> cropped;
    std::vector<const TrainingPair*> batch_pairs;
    std::vector<std::size_t> valid;
    for (std::size_t idx : batch) {
      if (tc.random_crop) {
        const auto& traj = dataset[idx];
        const std::size_t slack = traj.frames > mc.max_frames ? traj.frames - mc.max_frames : 0;
        const std::size_t start = slack ? static_cast<std::size_t>(rng.below(slack + 1)) : 0;
        const Example ex = make_example(traj, mc, tc.input_frames, start);
        cropped.push_back(make_training_pair(ex, mc));
        valid.push_back(ex.valid_channels);
      } else {
        valid.push_back(examples[idx].valid_channels);
      }
    }
    for (std::size_t i = 0; i < batch.size(); ++i) batch_pairs.push_back(tc.random_crop ? &cropped[i] : &pairs[batch[i]]);

    const double lr = wsd_lr(step, tc.steps, tc);
    double loss = 0.0;
    try {
      loss = batch_gradients(params, batch_pairs, valid, grads);
      if (!std::isfinite(loss)) throw NumericError("loss is not finite");
      clip_gradients(grads, tc.grad_clip);
      adamw_step(params, grads, state, lr, tc);
    } catch (const NumericError& e) {
      // Parameters still hold the last good step.
      if (!opts.out_dir.empty()) save_checkpoint(params, opts.out_dir / "last_good.bckp");
      throw NumericError("training aborted at step " + std::to_string(step) + ": " + e.what());
    }
    result.losses.push_back(loss);
    result.lrs.push_back(lr);
    if (metrics) {
      char line[96];
      std::snprintf(line, sizeof(line), "%zu,%.9g,%.9g\n", step, lr, loss);
      metrics << line;
    }
    if (opts.on_step) opts.on_step(step, lr, loss);
    if (!opts.out_dir.empty() && tc.checkpoint_every && (step + 1) % tc.checkpoint_every == 0) {
      char name[48];
      std::snprintf(name, sizeof(name), "checkpoint_%06zu.bckp", step + 1);
      save_checkpoint(params, opts.out_dir / name);
    }
  }
  if (!opts.out_dir.empty()) save_checkpoint(params, opts.out_dir / "model.bckp");
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

}  // namespace bcat
