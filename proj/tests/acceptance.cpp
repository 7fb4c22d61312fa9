// Acceptance suite: one PASS/FAIL line per criterion. Criteria can be
// selected by number on the command line; the exit code is nonzero when any
// selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "bcat/datagen.hpp"
#include "bcat/dataio.hpp"
#include "bcat/eval.hpp"
#include "bcat/gradcheck.hpp"
#include "bcat/metrics.hpp"
#include "bcat/model.hpp"
#include "bcat/rollout.hpp"
#include "bcat/training.hpp"

namespace {

namespace fs = std::filesystem;
using Tf = bcat::Tensor<float>;
constexpr double kPi = std::numbers::pi;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

Tf random_tokens(std::size_t s, std::size_t d, std::uint64_t seed) {
  bcat::Rng rng(seed);
  std::vector<float> v(s * d);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tf::from({1, s, d}, std::move(v));
}

bcat::GenSpec gen_spec(bcat::Family f, std::size_t r, std::size_t frames, double dt, std::uint64_t seed) {
  bcat::GenSpec s;
  s.family = f;
  s.resolution = r;
  s.n_frames = frames;
  s.dt = dt;
  s.seed = seed;
  return s;
}

double xcoord(std::size_t i, std::size_t r) { return 2.0 * kPi * static_cast<double>(i) / static_cast<double>(r); }

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bcat_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------
// 1. Masks

Outcome mask_correctness() {
  std::size_t checked = 0;
  for (std::size_t n : {1u, 4u, 16u})
    for (std::size_t frames : {2u, 5u, 20u}) {
      const auto m = bcat::build_mask(bcat::MaskKind::kBlockCausal, frames, n);
      const auto dense = m.dense();
      const std::size_t s = frames * n;
      if (m.length != s) return {false, "length mismatch"};
      const auto additive = bcat::additive_mask<float>(bcat::MaskKind::kBlockCausal, n, 0, s, s);
      for (std::size_t q = 0; q < s; ++q)
        for (std::size_t k = 0; k < s; ++k) {
          const bool want = (k / n) <= (q / n);
          if ((dense[q * s + k] != 0) != want) return {false, "block_causal wrong at N=" + std::to_string(n)};
          if ((additive[q * s + k] == 0.0f) != want) return {false, "additive mask disagrees at N=" + std::to_string(n)};
          ++checked;
        }
      if (n == 1 && dense != bcat::build_mask(bcat::MaskKind::kCausal, frames, 1).dense())
        return {false, "block_causal(N=1) differs from causal"};
    }
  return {true, std::to_string(checked) + " entries"};
}

// ---------------------------------------------------------------------------
// 2. Causality under perturbation

Outcome causality() {
  bcat::ModelConfig c;
  c.dim = 32;
  c.n_heads = 4;
  c.n_layers = 2;
  c.patch = 4;
  c.resolution = 16;  // N = 16
  c.channels = 2;
  c.max_frames = 6;
  const std::size_t n = c.tokens_per_frame(), pd = c.patch_dim(), frames = 6;
  std::size_t cases = 0;
  for (auto variant : {bcat::Variant::kBcat, bcat::Variant::kTimeThenSpace}) {
    c.variant = variant;
    const auto p = bcat::init_params<float>(c, 31);
    const auto x = random_tokens(frames * n, pd, 32);
    const auto base = bcat::forward(p, x);
    bcat::Rng rng(33);
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t j = rng.below(frames);
      const double amp = std::exp(rng.uniform(std::log(1e-3), std::log(1e2)));
      auto xv = x.vec();
      for (std::size_t i = j * n * pd; i < (j + 1) * n * pd; ++i) xv[i] += static_cast<float>(amp * rng.normal());
      const auto out = bcat::forward(p, Tf::from(x.shape(), xv));
      // Rows of frames < j predict frames <= j.
      for (std::size_t i = 0; i < j * n * pd; ++i)
        if (out[i] != base[i])
          return {false, bcat::to_string(variant) + ": output changed before frame " + std::to_string(j)};
      ++cases;
    }
  }
  return {true, std::to_string(cases) + " perturbations, bitwise identical"};
}

// ---------------------------------------------------------------------------
// 3. Gradient against finite differences

template <typename T>
double gradient_error(double h) {
  bcat::ModelConfig mc;
  mc.dim = 32;
  mc.n_heads = 4;
  mc.n_layers = 2;
  mc.resolution = 16;
  mc.patch = 8;
  mc.channels = 2;
  mc.max_frames = 4;
  const auto p = bcat::cast_params<T>(bcat::init_params<float>(mc, 41));
  auto s = gen_spec(bcat::Family::kLinearSwe, 16, 4, 0.2, 42);
  s.rms_min = s.rms_max = 1.0;
  const auto traj = bcat::gen_linear_swe(s);
  // Three physical channels do not fit in two; keep h and u.
  bcat::Trajectory two = bcat::Trajectory::zeros(traj.frames, 16, 16, 2);
  for (std::size_t i = 0; i < traj.data.size() / 3; ++i) {
    two.data[i * 2] = traj.data[i * 3];
    two.data[i * 2 + 1] = traj.data[i * 3 + 1];
  }
  const auto pair = bcat::make_training_pair(bcat::make_example(two, mc, 2), mc);
  const auto leaves = p.tensors();
  const auto grads = bcat::backward(bcat::example_loss(p, pair, 2));
  std::vector<double> analytic, numeric;
  bcat::Rng rng(43);
  for (std::size_t probe = 0; probe < 16; ++probe) {
    const auto& leaf = leaves[rng.below(leaves.size())];
    const std::size_t idx = rng.below(leaf.size());
    analytic.push_back(grads.of(leaf)[idx]);
    const std::size_t coords[1] = {idx};
    numeric.push_back(bcat::finite_difference_gradient(
        [&] { return static_cast<double>(bcat::example_loss(p, pair, 2).item()); }, leaf, h, coords)[0]);
  }
  return bcat::relative_error(analytic, numeric);
}

Outcome gradient() {
  const double e32 = gradient_error<float>(1e-2);
  const double e64 = gradient_error<double>(1e-5);
  return {e32 < 1e-2 && e64 < 1e-4, "f32 " + fmt("%.3e", e32) + " (< 1e-2), f64 " + fmt("%.3e", e64) + " (< 1e-4)"};
}

// ---------------------------------------------------------------------------
// 4. KV cache

Outcome kv_cache() {
  bcat::ModelConfig mc;  // R=32, P=8, D=64, 2 layers
  const auto p = bcat::init_params<float>(mc, 51);
  const bcat::Family families[5] = {bcat::Family::kAdvDiff, bcat::Family::kLinearSwe, bcat::Family::kInsVorticity,
                                    bcat::Family::kAdvDiff, bcat::Family::kLinearSwe};
  double worst = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto traj = bcat::generate(gen_spec(families[i], 32, 10, 0.1, 52 + i));
    const auto cached = bcat::rollout(p, traj, 10, true);
    const auto full = bcat::rollout(p, traj, 10, false);
    if (cached.predicted.data.size() != full.predicted.data.size() || cached.truncated || full.truncated)
      return {false, "rollouts differ in length"};
    for (std::size_t k = 0; k < full.predicted.data.size(); ++k)
      worst = std::max(worst, std::abs(static_cast<double>(cached.predicted.data[k]) - full.predicted.data[k]));
  }
  return {worst < 1e-5, "max |cached - uncached| " + fmt("%.3e", worst)};
}

// ---------------------------------------------------------------------------
// 5. Call counts and wall time

Outcome call_counts() {
  std::size_t checked = 0;
  struct Grid {
    std::size_t r, patch;
  };
  for (Grid g : {Grid{16, 8}, Grid{32, 8}, Grid{128, 8}}) {  // N = 4, 16, 256
    for (auto variant : {bcat::Variant::kBcat, bcat::Variant::kNextToken}) {
      bcat::ModelConfig mc;
      mc.dim = 16;
      mc.n_heads = 2;
      mc.n_layers = 1;
      mc.resolution = g.r;
      mc.patch = g.patch;
      mc.channels = 1;
      mc.max_frames = 11;
      mc.variant = variant;
      if (variant == bcat::Variant::kNextToken) mc.mask = bcat::MaskKind::kCausal;
      const auto p = bcat::init_params<float>(mc, 61);
      const auto traj = bcat::generate(gen_spec(bcat::Family::kAdvDiff, g.r, 2, 0.1, 62));
      const std::size_t n = mc.tokens_per_frame();
      for (std::size_t t : {1u, 4u, 10u}) {
        const auto r = bcat::rollout(p, traj.slice_frames(0, 1), t);
        const std::size_t want = variant == bcat::Variant::kBcat ? t : t * n;
        if (r.model_calls != want || r.predicted.frames != t)
          return {false, bcat::to_string(variant) + " N=" + std::to_string(n) + " T=" + std::to_string(t) + ": " +
                             std::to_string(r.model_calls) + " calls, expected " + std::to_string(want)};
        ++checked;
      }
    }
  }
  // Wall time at R=32, P=8, T=10. Without the cache every call recomputes
  // its prefix, so time follows the call count; with the cache both variants
  // process the same tokens and the ratio reflects per-call overhead only.
  bcat::ModelConfig frame_cfg;
  auto token_cfg = frame_cfg;
  token_cfg.variant = bcat::Variant::kNextToken;
  token_cfg.mask = bcat::MaskKind::kCausal;
  const auto traj = bcat::generate(gen_spec(bcat::Family::kAdvDiff, 32, 10, 0.1, 63));
  const auto frame_p = bcat::init_params<float>(frame_cfg, 64);
  const auto token_p = bcat::init_params<float>(token_cfg, 64);
  const auto fu = bcat::measure_resources(frame_p, traj, 10, 3, 1, false);
  const auto tu = bcat::measure_resources(token_p, traj, 10, 3, 1, false);
  const auto fc = bcat::measure_resources(frame_p, traj, 10, 5, 1, true);
  const auto tc = bcat::measure_resources(token_p, traj, 10, 5, 1, true);
  const double ratio = tu.median_ms / fu.median_ms;
  return {ratio > 5.0, std::to_string(checked) + " call counts exact; next_token " + fmt("%.1f ms", tu.median_ms) +
                           " / next_frame " + fmt("%.1f ms", fu.median_ms) + " = " + fmt("%.1fx", ratio) +
                           " (> 5); with kv cache " + fmt("%.1fx", tc.median_ms / fc.median_ms) + " (reported only)"};
}

// ---------------------------------------------------------------------------
// 6. Metric

double loop_relative_l2(const std::vector<float>& u, const std::vector<float>& v, std::size_t frames,
                        std::size_t frame_size) {
  double total = 0.0;
  for (std::size_t t = 0; t < frames; ++t) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < frame_size; ++i) {
      const double a = u[t * frame_size + i], b = v[t * frame_size + i];
      num += (a - b) * (a - b);
      den += b * b;
    }
    total += std::sqrt(num) / (std::sqrt(den) + bcat::kRelL2Eps);
  }
  return total / static_cast<double>(frames);
}

Outcome metric() {
  bcat::Rng rng(71);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t frames = 1 + rng.below(10), points = 1 + rng.below(64), channels = 1 + rng.below(4);
    const double scale = std::exp(rng.uniform(-3.0, 3.0));
    std::vector<float> pred(frames * points * channels), truth(pred.size());
    for (auto& x : truth) x = static_cast<float>(scale * rng.normal());
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = static_cast<float>(truth[i] + 0.3 * scale * rng.normal());
    const double got = bcat::relative_l2(pred, truth, frames, channels, channels);
    const double want = loop_relative_l2(pred, truth, frames, points * channels);
    worst = std::max(worst, std::abs(got - want));
    if (bcat::relative_l2(truth, truth, frames, channels, channels) != 0.0) return {false, "pred == truth is nonzero"};
    const double zero = bcat::relative_l2(std::vector<float>(pred.size(), 0.0f), truth, frames, channels, channels);
    if (!(zero >= 1.0 - 1e-4 && zero <= 1.0)) return {false, "pred == 0 gives " + fmt("%.8f", zero)};
  }
  return {worst < 1e-7, "max |metric - loop oracle| " + fmt("%.3e", worst) + " over 100 pairs"};
}

// ---------------------------------------------------------------------------
// 7. Data generators

// Each mode translates along its characteristic while decaying.
double adv_diff_oracle(const std::vector<bcat::Mode>& modes, double nu, double a, double b, double x, double y,
                       double t) {
  double c = 0.0;
  for (const auto& m : modes) {
    const double sx = x - a * t, sy = y - b * t;
    c += m.amplitude * std::cos(m.kx * sx + m.ky * sy + m.phase) * std::exp(-nu * (m.kx * m.kx + m.ky * m.ky) * t);
  }
  return c;
}

// Each mode is a gravity wave travelling at speed sqrt(gH) along direction
// * k/|k|; the initial (h, u, v) profile is shifted along that ray.
std::array<double, 3> swe_oracle(const std::vector<bcat::Mode>& modes, double gh0, double depth, double x, double y,
                                 double t) {
  const double c = std::sqrt(gh0);
  std::array<double, 3> out{depth, 0.0, 0.0};
  for (const auto& m : modes) {
    const double kn = std::sqrt(static_cast<double>(m.kx * m.kx + m.ky * m.ky));
    const double ex = m.kx / kn, ey = m.ky / kn;
    const double sx = x - m.direction * c * ex * t, sy = y - m.direction * c * ey * t;
    const double h = m.amplitude * std::cos(m.kx * sx + m.ky * sy + m.phase);
    // u = (g / c) h along the direction of travel
    out[0] += h;
    out[1] += m.direction * (c / depth) * ex * h;
    out[2] += m.direction * (c / depth) * ey * h;
  }
  return out;
}

Outcome generators() {
  double adv = 0.0, swe = 0.0, residual = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = gen_spec(bcat::Family::kAdvDiff, 32, 10, 0.1, seed);
    const auto traj = bcat::gen_adv_diff(s);
    const auto modes = bcat::modes_from_json(traj.meta.at("modes"));
    for (std::size_t t = 0; t < traj.frames; ++t)
      for (std::size_t j = 0; j < 32; ++j)
        for (std::size_t i = 0; i < 32; ++i) {
          const double ref = adv_diff_oracle(modes, s.viscosity, s.velocity_x, s.velocity_y, xcoord(i, 32),
                                             xcoord(j, 32), 0.1 * static_cast<double>(t));
          adv = std::max(adv, std::abs(traj.at(t, j, i, 0) - static_cast<double>(static_cast<float>(ref))));
        }
  }
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto s = gen_spec(bcat::Family::kLinearSwe, 32, 10, 0.2, 100 + seed);
    s.gh0 = 1.5;
    s.depth = 0.75;
    const auto traj = bcat::gen_linear_swe(s);
    const auto modes = bcat::modes_from_json(traj.meta.at("modes"));
    for (std::size_t t = 0; t < traj.frames; ++t)
      for (std::size_t j = 0; j < 32; ++j)
        for (std::size_t i = 0; i < 32; ++i) {
          const auto ref = swe_oracle(modes, s.gh0, s.depth, xcoord(i, 32), xcoord(j, 32), 0.2 * static_cast<double>(t));
          for (std::size_t c = 0; c < 3; ++c)
            swe = std::max(swe, std::abs(traj.at(t, j, i, c) - static_cast<double>(static_cast<float>(ref[c]))));
        }
    // The oracle itself solves h_t + H (u_x + v_y) = 0, u_t + g h_x = 0, v_t + g h_y = 0.
    const double g = s.gh0 / s.depth, e = 1e-5;
    auto f = [&](double x, double y, double t) { return swe_oracle(modes, s.gh0, s.depth, x, y, t); };
    for (double x : {0.3, 2.1, 5.0})
      for (double y : {0.7, 4.4}) {
        const double t = 0.5;
        const auto tp = f(x, y, t + e), tm = f(x, y, t - e);
        const auto xp = f(x + e, y, t), xm = f(x - e, y, t);
        const auto yp = f(x, y + e, t), ym = f(x, y - e, t);
        const double ux = (xp[1] - xm[1]) / (2 * e), vy = (yp[2] - ym[2]) / (2 * e);
        residual = std::max(residual, std::abs((tp[0] - tm[0]) / (2 * e) + s.depth * (ux + vy)));
        residual = std::max(residual, std::abs((tp[1] - tm[1]) / (2 * e) + g * (xp[0] - xm[0]) / (2 * e)));
        residual = std::max(residual, std::abs((tp[2] - tm[2]) / (2 * e) + g * (yp[0] - ym[0]) / (2 * e)));
      }
  }

  // Taylor-Green: w = 2 cos x cos y exp(-2 nu t).
  auto tg = gen_spec(bcat::Family::kInsVorticity, 32, 11, 0.1, 0);
  tg.viscosity = 0.1;
  tg.init = bcat::VorticityInit::kTaylorGreen;
  const auto tgt = bcat::gen_ins_vorticity(tg);
  const double decay = std::exp(-2.0 * tg.viscosity * 1.0);
  double tg_err = 0.0, num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < 32; ++j)
    for (std::size_t i = 0; i < 32; ++i) {
      const double w0 = 2.0 * std::cos(xcoord(i, 32)) * std::cos(xcoord(j, 32));
      tg_err = std::max(tg_err, std::abs(tgt.at(10, j, i, 2) - w0 * decay) / 2.0);
      num += tgt.at(10, j, i, 2) * w0;
      den += w0 * w0;
    }
  const double fitted = std::abs(num / den - decay);

  double div = 0.0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto s = gen_spec(bcat::Family::kInsVorticity, 32, 6, 0.1, seed);
    s.rms_max = 2.0;
    for (const auto& d : bcat::gen_ins_vorticity(s).meta.at("divergence")) div = std::max(div, d.get<double>());
  }
  const bool ok = adv < 1e-6 && swe < 1e-6 && residual < 1e-6 && tg_err < 1e-4 && fitted < 1e-4 && div < 1e-10;
  return {ok, "adv_diff " + fmt("%.2e", adv) + ", linear_swe " + fmt("%.2e", swe) + " (pde residual " +
                  fmt("%.1e", residual) + "), taylor_green field " + fmt("%.2e", tg_err) + " decay " +
                  fmt("%.2e", fitted) + ", divergence " + fmt("%.1e", div)};
}

// ---------------------------------------------------------------------------
// 8. Training smoke and variant ordering

// Pilot (2000 steps, seed 3): bcat loss ratio ~4200x, rollout ~4.7%,
// teacher-forced ~1.2%; next_token rollout ~16.8%, teacher-forced ~5.8%.
constexpr double kMinLossRatio = 10.0;
constexpr double kMaxRollout = 0.20;
constexpr double kMaxTeacherForcedRatio = 3.0;

struct SmokeResult {
  double loss_ratio = 0.0, rollout = 0.0, teacher_forced = 0.0, seconds = 0.0;
};

SmokeResult smoke(bcat::Variant variant, const std::vector<bcat::Trajectory>& train,
                  const std::vector<bcat::Trajectory>& test) {
  bcat::ModelConfig mc;  // 2 layers, D=64, R=32, P=8
  mc.variant = variant;
  if (variant == bcat::Variant::kNextToken) mc.mask = bcat::MaskKind::kCausal;
  bcat::TrainConfig tc;
  tc.steps = 2000;
  tc.seed = 3;
  const auto r = bcat::train(mc, tc, train);
  SmokeResult out;
  out.seconds = r.seconds;
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    head += r.losses[i];
    tail += r.losses[r.losses.size() - 50 + i];
  }
  out.loss_ratio = head / tail;
  for (const auto& t : test) {
    const auto rep = bcat::rollout(r.params, t.slice_frames(0, 10), 10);
    out.rollout += bcat::relative_l2(rep.predicted, bcat::target_frames(mc, t, 10, 10)) / test.size();
    for (double e : bcat::teacher_forced_next_error(r.params, t, 10, 10)) out.teacher_forced += e / (10.0 * test.size());
  }
  return out;
}

Outcome training_smoke() {
  bcat::GenSpec s;  // adv_diff, R=32, 20 frames
  std::vector<bcat::Trajectory> train, test;
  for (std::size_t i = 0; i < 64; ++i) {
    s.seed = bcat::derive_seed(1, i);
    train.push_back(bcat::generate(s));
  }
  for (std::size_t i = 0; i < 8; ++i) {
    s.seed = bcat::derive_seed(2, i);
    test.push_back(bcat::generate(s));
  }
  const auto frame = smoke(bcat::Variant::kBcat, train, test);
  const auto token = smoke(bcat::Variant::kNextToken, train, test);
  const bool a = frame.loss_ratio >= kMinLossRatio;
  const bool b = frame.rollout < kMaxRollout;
  const bool c = frame.rollout <= token.rollout;
  const double tf_ratio = std::max(frame.teacher_forced, token.teacher_forced) /
                          std::min(frame.teacher_forced, token.teacher_forced);
  const bool d = tf_ratio <= kMaxTeacherForcedRatio;
  return {a && b && c && d,
          std::string("(a) loss ratio ") + fmt("%.0f", frame.loss_ratio) + (a ? " ok" : " FAIL") + "; (b) rollout " +
              fmt("%.4f", frame.rollout) + (b ? " ok" : " FAIL") + "; (c) next_frame " + fmt("%.4f", frame.rollout) +
              " vs next_token " + fmt("%.4f", token.rollout) + (c ? " ok" : " FAIL") + "; (d) teacher-forced " +
              fmt("%.4f", frame.teacher_forced) + " vs " + fmt("%.4f", token.teacher_forced) + " ratio " +
              fmt("%.2f", tf_ratio) + (d ? " ok" : " FAIL") + "; train " + fmt("%.0fs", frame.seconds) + " + " +
              fmt("%.0fs", token.seconds)};
}

// ---------------------------------------------------------------------------
// 9. Affine equivariance

Outcome affine() {
  bcat::ModelConfig mc;
  const auto p = bcat::init_params<float>(mc, 91);
  const auto traj = bcat::gen_linear_swe(gen_spec(bcat::Family::kLinearSwe, 32, 10, 0.1, 92));
  const auto base = bcat::rollout(p, traj, 10);
  bcat::Rng rng(93);
  double worst = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    std::array<double, 3> alpha{}, beta{};
    for (std::size_t c = 0; c < 3; ++c) {
      alpha[c] = std::exp(rng.uniform(-2.0, 2.0));
      beta[c] = rng.uniform(-5.0, 5.0);
    }
    bcat::Trajectory moved = traj;
    for (std::size_t i = 0; i < moved.data.size(); ++i)
      moved.data[i] = static_cast<float>(alpha[i % 3] * traj.data[i] + beta[i % 3]);
    const auto out = bcat::rollout(p, moved, 10);
    double num = 0.0, den = 0.0;
    const std::size_t ch = out.predicted.channels;
    for (std::size_t i = 0; i < out.predicted.data.size(); ++i) {
      const std::size_t c = i % ch;
      if (c >= 3) continue;
      const double want = alpha[c] * base.predicted.data[i] + beta[c];
      num += (out.predicted.data[i] - want) * (out.predicted.data[i] - want);
      den += want * want;
    }
    worst = std::max(worst, std::sqrt(num / den));
  }
  return {worst < 1e-4, "relative deviation " + fmt("%.2e", worst) + " over 3 random transforms"};
}

// ---------------------------------------------------------------------------
// 10. Reference scale

Outcome reference_scale() {
  bcat::ModelConfig c;
  c.dim = 1024;
  c.ffn_hidden = 2752;
  c.n_layers = 12;
  c.n_heads = 8;
  c.patch = 8;
  c.resolution = 128;
  c.max_frames = 20;
  const std::size_t built = bcat::init_params<float>(c, 0).count();
  const double rel = std::abs(static_cast<double>(built) - 156e6) / 156e6;
  const bool ok = rel < 0.02 && c.max_tokens() == 5120 && built == bcat::count_params(c);
  return {ok, std::to_string(built) + " parameters (" + fmt("%.2f%%", 100 * rel) + " from 156M), max sequence " +
                  std::to_string(c.max_tokens())};
}

// ---------------------------------------------------------------------------
// 11. Determinism

std::map<std::string, std::string> dir_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = bcat::detail::read_file(e.path());
  return out;
}

Outcome determinism() {
  const fs::path root = scratch_dir("determinism");
  bcat::GenSpec gen;
  gen.family = bcat::Family::kInsVorticity;
  gen.n_frames = 12;
  gen.rms_max = 2.0;
  bcat::make_dataset(gen, 6, 111, root / "data_a");
  bcat::make_dataset(gen, 6, 111, root / "data_b");
  const auto a = dir_bytes(root / "data_a"), b = dir_bytes(root / "data_b");
  if (a != b) return {false, "datagen bytes differ"};
  const auto manifest = bcat::read_manifest(root / "data_a" / "manifest.json");
  const auto data = manifest.load_all();

  bcat::ModelConfig mc;
  bcat::TrainConfig tc;
  tc.steps = 200;
  tc.seed = 112;
  tc.input_frames = 6;
  tc.output_frames = 6;
  const auto r1 = bcat::train(mc, tc, data);
  const auto r2 = bcat::train(mc, tc, data);
  if (r1.losses != r2.losses) return {false, "training losses differ"};
  if (bcat::encode_checkpoint(r1.params) != bcat::encode_checkpoint(r2.params)) return {false, "checkpoints differ"};

  bcat::EvalConfig ec;
  ec.input_frames = 6;
  ec.output_frames = 6;
  const auto e1 = bcat::evaluate(r1.params, {manifest}, ec);
  const auto e2 = bcat::evaluate(r2.params, {manifest}, ec);
  bcat::write_report_csv(e1, root / "r1.csv");
  bcat::write_report_csv(e2, root / "r2.csv");
  if (bcat::detail::read_file(root / "r1.csv") != bcat::detail::read_file(root / "r2.csv"))
    return {false, "eval reports differ"};
  fs::remove_all(root);
  return {true, std::to_string(a.size()) + " files, 200-step losses and checkpoint, eval report identical"};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "mask correctness", 1, mask_correctness},
      {2, "causality perturbation", 10, causality},
      {3, "gradient correctness", 120, gradient},
      {4, "kv-cache equivalence", 60, kv_cache},
      {5, "call-count law", 0, call_counts},
      {6, "metric oracle", 10, metric},
      {7, "data-generator oracles", 60, generators},
      {8, "training smoke + ordering", 1800, training_smoke},
      {9, "affine equivariance", 60, affine},
      {10, "reference-scale arithmetic", 60, reference_scale},
      {11, "determinism", 0, determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string timing = fmt("%.1fs", secs);
    if (c.budget_s > 0) {
      timing += fmt(" of %.0fs", c.budget_s);
      if (secs > c.budget_s) {
        o.pass = false;
        timing += " OVER BUDGET";
      }
    }
    std::printf("CRITERION %d %s: %s [%s] %s\n", c.id, o.pass ? "PASS" : "FAIL", c.name, timing.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
