#pragma once

// Synthetic periodic 2D trajectories on [0, 2pi)^2 with known ground truth.
//
//   adv_diff       c = sum_k A cos(k.x - (k.a) t + phi) exp(-nu |k|^2 t)    (exact)
//   linear_swe     plane waves of the shallow-water equations linearized
//                  about rest depth H0, omega = sqrt(g H0) |k|          (exact)
//   ins_vorticity  2D incompressible Navier-Stokes in vorticity form,
//                  pseudo-spectral, 2/3-rule dealiasing, integrating-factor
//                  RK4 substeps bounded by max|u| dt_sub / dx <= 0.5
//
// Grid point (row j, col i) sits at x = 2 pi i / R, y = 2 pi j / R.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "bcat/dataio.hpp"
#include "bcat/error.hpp"
#include "bcat/parallel.hpp"
#include "bcat/rng.hpp"
#include "bcat/spectral.hpp"

namespace bcat {

enum class Family { kAdvDiff, kLinearSwe, kInsVorticity };

inline std::string family_name(Family f) {
  switch (f) {
    case Family::kAdvDiff: return "adv_diff";
    case Family::kLinearSwe: return "linear_swe";
    case Family::kInsVorticity: return "ins_vorticity";
  }
  return "?";
}

inline Family parse_family(const std::string& name) {
  if (name == "adv_diff") return Family::kAdvDiff;
  if (name == "linear_swe") return Family::kLinearSwe;
  if (name == "ins_vorticity") return Family::kInsVorticity;
  throw ConfigError("family: unknown value '" + name + "' (adv_diff, linear_swe, ins_vorticity)");
}

/// One Fourier component. `direction` is the propagation sign for
/// shallow-water waves (+1 or -1) and ignored elsewhere.
struct Mode {
  int kx = 0;
  int ky = 0;
  double amplitude = 0.0;
  double phase = 0.0;
  int direction = 1;
};

enum class VorticityInit { kRandom, kTaylorGreen, kZero };

struct GenSpec {
  Family family = Family::kAdvDiff;
  std::size_t resolution = 32;
  std::size_t n_frames = 20;
  double dt = 0.1;
  double viscosity = 0.01;
  double velocity_x = 0.5;  // advection (a, b)
  double velocity_y = 0.25;
  double gh0 = 1.0;    // g * H0
  double depth = 1.0;  // H0
  std::size_t max_modes = 8;
  int max_wavenumber = 3;
  double rms_min = 0.1;  // per-channel RMS range of the perturbation at t = 0
  double rms_max = 10.0;
  VorticityInit init = VorticityInit::kRandom;
  std::size_t max_substeps = 100000;
  std::vector<Mode> modes;  // explicit spectrum; when empty one is drawn from the seed
  std::uint64_t seed = 0;

  void validate() const {
    const std::size_t r = resolution;
    if (r < 16 || r > 128 || (r & (r - 1)) != 0)
      throw ConfigError("resolution: must be a power of two in [16, 128], got " + std::to_string(r));
    if (n_frames < 2) throw ConfigError("n_frames: must be >= 2");
    if (!(dt > 0.0)) throw ConfigError("dt: must be positive");
    if (viscosity < 0.0) throw ConfigError("viscosity: must be >= 0");
    if (family == Family::kInsVorticity && !(viscosity > 0.0))
      throw ConfigError("viscosity: ins_vorticity requires nu > 0");
    if (!(gh0 > 0.0) || !(depth > 0.0)) throw ConfigError("gh0/depth: must be positive");
    if (max_modes < 1 || max_modes > 8) throw ConfigError("max_modes: must be in [1, 8]");
    if (modes.size() > 8) throw ConfigError("modes: at most 8 modes");
    if (max_wavenumber < 1 || max_wavenumber >= static_cast<int>(r / 3))
      throw ConfigError("max_wavenumber: must be in [1, R/3)");
    if (rms_min < 0.0 || rms_max < rms_min) throw ConfigError("rms_min/rms_max: invalid range");
  }
};

inline nlohmann::json modes_to_json(const std::vector<Mode>& modes) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : modes) arr.push_back({m.kx, m.ky, m.amplitude, m.phase, m.direction});
  return arr;
}

inline std::vector<Mode> modes_from_json(const nlohmann::json& arr) {
  std::vector<Mode> modes;
  for (const auto& m : arr)
    modes.push_back({m.at(0).get<int>(), m.at(1).get<int>(), m.at(2).get<double>(), m.at(3).get<double>(),
                     m.at(4).get<int>()});
  return modes;
}

inline std::string vorticity_init_name(VorticityInit v) {
  switch (v) {
    case VorticityInit::kRandom: return "random";
    case VorticityInit::kTaylorGreen: return "taylor_green";
    case VorticityInit::kZero: return "zero";
  }
  return "?";
}

inline VorticityInit parse_vorticity_init(const std::string& s) {
  if (s == "random") return VorticityInit::kRandom;
  if (s == "taylor_green") return VorticityInit::kTaylorGreen;
  if (s == "zero") return VorticityInit::kZero;
  throw ConfigError("init: unknown value '" + s + "' (random, taylor_green, zero)");
}

inline nlohmann::json gen_spec_to_json(const GenSpec& s) {
  return {{"family", family_name(s.family)},
          {"resolution", s.resolution},
          {"frames", s.n_frames},
          {"dt", s.dt},
          {"viscosity", s.viscosity},
          {"velocity", {s.velocity_x, s.velocity_y}},
          {"gh0", s.gh0},
          {"depth", s.depth},
          {"max_modes", s.max_modes},
          {"max_wavenumber", s.max_wavenumber},
          {"rms_range", {s.rms_min, s.rms_max}},
          {"init", vorticity_init_name(s.init)},
          {"max_substeps", s.max_substeps},
          {"modes", modes_to_json(s.modes)},
          {"seed", s.seed}};
}

namespace detail {

inline double grid_coord(std::size_t i, std::size_t r) {
  return 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(r);
}

// Distinct non-zero wavevectors with |kx|,|ky| <= kmax, no k/-k pairs.
inline std::vector<Mode> draw_modes(Rng& rng, const GenSpec& spec) {
  const std::size_t count = 1 + rng.below(spec.max_modes);
  std::vector<Mode> modes;
  while (modes.size() < count) {
    Mode m;
    m.kx = static_cast<int>(rng.range(-spec.max_wavenumber, spec.max_wavenumber));
    m.ky = static_cast<int>(rng.range(-spec.max_wavenumber, spec.max_wavenumber));
    if (m.kx == 0 && m.ky == 0) continue;
    bool dup = false;
    for (const auto& o : modes)
      if ((o.kx == m.kx && o.ky == m.ky) || (o.kx == -m.kx && o.ky == -m.ky)) dup = true;
    if (dup) continue;
    m.amplitude = rng.normal();
    m.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    m.direction = rng.uniform() < 0.5 ? 1 : -1;
    modes.push_back(m);
  }
  return modes;
}

inline double rms(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc / static_cast<double>(v.size()));
}

// Scale factor drawn log-uniformly so that every channel's RMS (given their
// values at unit scale) lands in [rms_min, rms_max].
inline double draw_scale(Rng& rng, const GenSpec& spec, const std::vector<double>& unit_rms) {
  if (spec.rms_max == 0.0) return 0.0;
  double lo = 0.0, hi = std::numeric_limits<double>::infinity();
  for (double r : unit_rms) {
    if (r <= 0.0) continue;
    lo = std::max(lo, spec.rms_min / r);
    hi = std::min(hi, spec.rms_max / r);
  }
  if (!std::isfinite(hi)) return 0.0;
  if (lo > hi) lo = hi;  // channel ratios too wide for the range; favour the upper bound
  if (lo <= 0.0) return hi * rng.uniform();
  return std::exp(rng.uniform(std::log(lo), std::log(hi)));
}

inline void scale_modes(std::vector<Mode>& modes, double s) {
  for (auto& m : modes) m.amplitude *= s;
}

}  // namespace detail

/// Closed-form advection-diffusion value.
inline double adv_diff_value(const std::vector<Mode>& modes, const GenSpec& spec, double x, double y, double t) {
  double c = 0.0;
  for (const auto& m : modes) {
    const double k2 = static_cast<double>(m.kx * m.kx + m.ky * m.ky);
    const double theta = m.kx * x + m.ky * y - (m.kx * spec.velocity_x + m.ky * spec.velocity_y) * t + m.phase;
    c += m.amplitude * std::cos(theta) * std::exp(-spec.viscosity * k2 * t);
  }
  return c;
}

/// Closed-form linear shallow-water state (h, u, v).
inline std::array<double, 3> linear_swe_value(const std::vector<Mode>& modes, const GenSpec& spec, double x, double y,
                                              double t) {
  const double c = std::sqrt(spec.gh0);
  std::array<double, 3> out{spec.depth, 0.0, 0.0};
  for (const auto& m : modes) {
    const double kn = std::hypot(static_cast<double>(m.kx), static_cast<double>(m.ky));
    const double theta = m.kx * x + m.ky * y - m.direction * c * kn * t + m.phase;
    const double h = m.amplitude * std::cos(theta);
    const double vel = m.direction * (c / spec.depth) / kn;
    out[0] += h;
    out[1] += vel * m.kx * h;
    out[2] += vel * m.ky * h;
  }
  return out;
}

namespace detail {

template <typename Eval>
Trajectory sample_closed_form(const GenSpec& spec, std::size_t channels, std::vector<std::string> names, Eval&& eval) {
  const std::size_t r = spec.resolution;
  Trajectory traj = Trajectory::zeros(spec.n_frames, r, r, channels);
  traj.channel_names = std::move(names);
  traj.dt = spec.dt;
  traj.dx = 2.0 * std::numbers::pi / static_cast<double>(r);
  traj.family = family_name(spec.family);
  traj.seed = spec.seed;
  for (std::size_t t = 0; t < spec.n_frames; ++t) {
    const double time = static_cast<double>(t) * spec.dt;
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t i = 0; i < r; ++i) {
        const auto values = eval(grid_coord(i, r), grid_coord(j, r), time);
        for (std::size_t c = 0; c < channels; ++c) traj.at(t, j, i, c) = static_cast<float>(values[c]);
      }
  }
  return traj;
}

}  // namespace detail

inline Trajectory gen_adv_diff(const GenSpec& spec) {
  if (spec.family != Family::kAdvDiff) throw ConfigError("family: gen_adv_diff needs adv_diff");
  spec.validate();
  Rng rng(spec.seed);
  std::vector<Mode> modes = spec.modes;
  if (modes.empty()) {
    modes = detail::draw_modes(rng, spec);
    std::vector<double> field;
    for (std::size_t j = 0; j < spec.resolution; ++j)
      for (std::size_t i = 0; i < spec.resolution; ++i)
        field.push_back(adv_diff_value(modes, spec, detail::grid_coord(i, spec.resolution),
                                       detail::grid_coord(j, spec.resolution), 0.0));
    detail::scale_modes(modes, detail::draw_scale(rng, spec, {detail::rms(field)}));
  }
  auto traj = detail::sample_closed_form(spec, 1, {"c"}, [&](double x, double y, double t) {
    return std::array<double, 1>{adv_diff_value(modes, spec, x, y, t)};
  });
  traj.meta = {{"modes", modes_to_json(modes)}};
  return traj;
}

inline Trajectory gen_linear_swe(const GenSpec& spec) {
  if (spec.family != Family::kLinearSwe) throw ConfigError("family: gen_linear_swe needs linear_swe");
  spec.validate();
  Rng rng(spec.seed);
  std::vector<Mode> modes = spec.modes;
  if (modes.empty()) {
    modes = detail::draw_modes(rng, spec);
    std::array<std::vector<double>, 3> fields;
    for (std::size_t j = 0; j < spec.resolution; ++j)
      for (std::size_t i = 0; i < spec.resolution; ++i) {
        auto v = linear_swe_value(modes, spec, detail::grid_coord(i, spec.resolution),
                                  detail::grid_coord(j, spec.resolution), 0.0);
        fields[0].push_back(v[0] - spec.depth);
        fields[1].push_back(v[1]);
        fields[2].push_back(v[2]);
      }
    detail::scale_modes(modes, detail::draw_scale(rng, spec,
                                                  {detail::rms(fields[0]), detail::rms(fields[1]), detail::rms(fields[2])}));
  }
  auto traj = detail::sample_closed_form(spec, 3, {"h", "u", "v"},
                                         [&](double x, double y, double t) { return linear_swe_value(modes, spec, x, y, t); });
  traj.meta = {{"modes", modes_to_json(modes)}};
  return traj;
}

// ---------------------------------------------------------------------------
// Incompressible Navier-Stokes, vorticity-streamfunction form:
//   w_t + u . grad w = nu lap w,  lap psi = -w,  u = psi_y,  v = -psi_x.

class VorticitySolver {
 public:
  using Complex = SpectralGrid::Complex;

  VorticitySolver(std::size_t resolution, double viscosity)
      : grid_(resolution), nu_(viscosity), dx_(2.0 * std::numbers::pi / static_cast<double>(resolution)) {
    const std::size_t n = resolution;
    const double cutoff = static_cast<double>(n) / 3.0;
    keep_.resize(grid_.spectrum_size());
    k2_.resize(grid_.spectrum_size());
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < grid_.kx_count(); ++c) {
        const std::size_t k = r * grid_.kx_count() + c;
        k2_[k] = grid_.kx(c) * grid_.kx(c) + grid_.ky(r) * grid_.ky(r);
        keep_[k] = std::abs(grid_.kx(c)) < cutoff && std::abs(grid_.ky(r)) < cutoff;
      }
  }

  const SpectralGrid& grid() const { return grid_; }
  double dx() const { return dx_; }

  std::vector<Complex> to_spectrum(const std::vector<double>& w) const { return grid_.forward(w); }

  /// Velocity components from a vorticity spectrum.
  std::pair<std::vector<double>, std::vector<double>> velocity(const std::vector<Complex>& wh) const {
    std::vector<Complex> uh(wh.size()), vh(wh.size());
    const Complex i1(0.0, 1.0);
    for (std::size_t r = 0; r < grid_.resolution(); ++r)
      for (std::size_t c = 0; c < grid_.kx_count(); ++c) {
        const std::size_t k = r * grid_.kx_count() + c;
        if (k2_[k] == 0.0) continue;
        const Complex psi = wh[k] / k2_[k];
        uh[k] = i1 * grid_.dky(r) * psi;
        vh[k] = -i1 * grid_.dkx(c) * psi;
      }
    return {grid_.inverse(uh), grid_.inverse(vh)};
  }

  static double max_speed(const std::vector<double>& u, const std::vector<double>& v) {
    double m = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) m = std::max(m, std::hypot(u[i], v[i]));
    return m;
  }

  /// Advances the spectrum by `duration` in substeps chosen so that
  /// max|u| dt_sub / dx <= cfl_target, checking the 0.5 bound at every stage.
  void advance(std::vector<Complex>& wh, double duration, std::size_t max_substeps, double cfl_target = 0.4) const {
    auto [u, v] = velocity(wh);
    const double speed = max_speed(u, v);
    const std::size_t steps =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(duration * speed / (cfl_target * dx_))));
    if (steps > max_substeps)
      throw DataError("ins_vorticity: stability bound violated, needs " + std::to_string(steps) +
                      " substeps per frame (max_substeps=" + std::to_string(max_substeps) + ")");
    const double h = duration / static_cast<double>(steps);
    for (std::size_t s = 0; s < steps; ++s) rk4_step(wh, h);
  }

 private:
  // Dealiased spectrum of -(u w_x + v w_y); checks the CFL bound for step h.
  std::vector<Complex> nonlinear(const std::vector<Complex>& wh, double h) const {
    const Complex i1(0.0, 1.0);
    std::vector<Complex> wxh(wh.size()), wyh(wh.size());
    for (std::size_t r = 0; r < grid_.resolution(); ++r)
      for (std::size_t c = 0; c < grid_.kx_count(); ++c) {
        const std::size_t k = r * grid_.kx_count() + c;
        wxh[k] = i1 * grid_.dkx(c) * wh[k];
        wyh[k] = i1 * grid_.dky(r) * wh[k];
      }
    auto [u, v] = velocity(wh);
    if (max_speed(u, v) * h / dx_ > 0.5)
      throw DataError("ins_vorticity: stability bound violated (max|u| dt_sub / dx > 0.5)");
    const auto wx = grid_.inverse(wxh);
    const auto wy = grid_.inverse(wyh);
    std::vector<double> adv(u.size());
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = -(u[i] * wx[i] + v[i] * wy[i]);
    auto out = grid_.forward(adv);
    for (std::size_t k = 0; k < out.size(); ++k)
      if (!keep_[k]) out[k] = 0.0;
    return out;
  }

  // Integrating-factor RK4; the viscous term is integrated exactly.
  void rk4_step(std::vector<Complex>& wh, double h) const {
    const std::size_t n = wh.size();
    std::vector<double> e(n), e2(n);
    for (std::size_t k = 0; k < n; ++k) {
      e[k] = std::exp(-nu_ * k2_[k] * h);
      e2[k] = std::exp(-nu_ * k2_[k] * h / 2.0);
    }
    std::vector<Complex> tmp(n);
    const auto k1 = nonlinear(wh, h);
    for (std::size_t k = 0; k < n; ++k) tmp[k] = e2[k] * (wh[k] + 0.5 * h * k1[k]);
    const auto k2 = nonlinear(tmp, h);
    for (std::size_t k = 0; k < n; ++k) tmp[k] = e2[k] * wh[k] + 0.5 * h * k2[k];
    const auto k3 = nonlinear(tmp, h);
    for (std::size_t k = 0; k < n; ++k) tmp[k] = e[k] * wh[k] + h * e2[k] * k3[k];
    const auto k4 = nonlinear(tmp, h);
    for (std::size_t k = 0; k < n; ++k)
      wh[k] = e[k] * wh[k] + h / 6.0 * (e[k] * k1[k] + 2.0 * e2[k] * (k2[k] + k3[k]) + k4[k]);
    for (std::size_t k = 0; k < n; ++k)
      if (!keep_[k]) wh[k] = 0.0;
  }

  SpectralGrid grid_;
  double nu_;
  double dx_;
  std::vector<double> k2_;
  std::vector<bool> keep_;
};

inline Trajectory gen_ins_vorticity(const GenSpec& spec) {
  if (spec.family != Family::kInsVorticity) throw ConfigError("family: gen_ins_vorticity needs ins_vorticity");
  spec.validate();
  const std::size_t r = spec.resolution;
  VorticitySolver solver(r, spec.viscosity);
  Rng rng(spec.seed);

  std::vector<double> w0(r * r, 0.0);
  std::vector<Mode> modes = spec.modes;
  auto fill = [&](const std::vector<Mode>& ms) {
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (const auto& m : ms)
          acc += m.amplitude * std::cos(m.kx * detail::grid_coord(i, r) + m.ky * detail::grid_coord(j, r) + m.phase);
        w0[j * r + i] = acc;
      }
  };
  switch (spec.init) {
    case VorticityInit::kZero: break;
    case VorticityInit::kTaylorGreen:
      for (std::size_t j = 0; j < r; ++j)
        for (std::size_t i = 0; i < r; ++i)
          w0[j * r + i] = 2.0 * std::cos(detail::grid_coord(i, r)) * std::cos(detail::grid_coord(j, r));
      break;
    case VorticityInit::kRandom:
      if (modes.empty()) {
        modes = detail::draw_modes(rng, spec);
        fill(modes);
        const auto [u, v] = solver.velocity(solver.to_spectrum(w0));
        detail::scale_modes(modes, detail::draw_scale(rng, spec, {detail::rms(u), detail::rms(v), detail::rms(w0)}));
      }
      fill(modes);
      break;
  }

  Trajectory traj = Trajectory::zeros(spec.n_frames, r, r, 3);
  traj.channel_names = {"u", "v", "w"};
  traj.dt = spec.dt;
  traj.dx = solver.dx();
  traj.family = family_name(spec.family);
  traj.seed = spec.seed;

  auto wh = solver.to_spectrum(w0);
  nlohmann::json divergence = nlohmann::json::array();
  nlohmann::json energy = nlohmann::json::array();
  for (std::size_t t = 0; t < spec.n_frames; ++t) {
    if (t > 0) solver.advance(wh, spec.dt, spec.max_substeps);
    const auto [u, v] = solver.velocity(wh);
    const auto w = solver.grid().inverse(wh);
    double ke = 0.0;
    for (std::size_t p = 0; p < r * r; ++p) {
      traj.data[t * r * r * 3 + p * 3 + 0] = static_cast<float>(u[p]);
      traj.data[t * r * r * 3 + p * 3 + 1] = static_cast<float>(v[p]);
      traj.data[t * r * r * 3 + p * 3 + 2] = static_cast<float>(w[p]);
      ke += 0.5 * (u[p] * u[p] + v[p] * v[p]);
    }
    divergence.push_back(spectral_divergence(solver.grid(), u, v));
    energy.push_back(ke / static_cast<double>(r * r));
  }
  traj.meta = {{"modes", modes_to_json(modes)}, {"divergence", divergence}, {"energy", energy}};
  return traj;
}

inline Trajectory generate(const GenSpec& spec) {
  switch (spec.family) {
    case Family::kAdvDiff: return gen_adv_diff(spec);
    case Family::kLinearSwe: return gen_linear_swe(spec);
    case Family::kInsVorticity: return gen_ins_vorticity(spec);
  }
  throw ConfigError("family: unknown");
}

/// Writes n_traj trajectories (seeds derived from `seed` and the index via
/// splitmix64) plus manifest.json under `out_dir`. Output bytes do not depend
/// on the worker count.
inline Manifest make_dataset(const GenSpec& spec_template, std::size_t n_traj, std::uint64_t seed,
                             const std::filesystem::path& out_dir) {
  if (n_traj < 1) throw ConfigError("n: must be >= 1");
  spec_template.validate();
  Manifest manifest;
  manifest.family = family_name(spec_template.family);
  manifest.directory = out_dir;
  manifest.files.resize(n_traj);
  auto generator = gen_spec_to_json(spec_template);
  generator["seed"] = seed;
  generator["n"] = n_traj;
  manifest.generator = generator;

  parallel_for(n_traj, [&](std::size_t i) {
    GenSpec spec = spec_template;
    spec.seed = derive_seed(seed, i);
    Trajectory traj = generate(spec);
    char name[32];
    std::snprintf(name, sizeof(name), "traj_%05zu.btrj", i);
    write_trajectory(traj, out_dir / name);
    manifest.files[i] = {name, spec.seed, traj.frames, traj.height, traj.channels, traj.meta};
  });
  write_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace bcat
