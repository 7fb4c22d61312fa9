#pragma once

// Periodic 2D FFTs on an R x R grid over [0, 2pi)^2, backed by FFTW.
// Layout: real fields are [y][x]; spectra are [ky][kx] with kx in [0, R/2].

#include <complex>
#include <cstddef>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "bcat/error.hpp"

namespace bcat {

class SpectralGrid {
 public:
  using Complex = std::complex<double>;

  explicit SpectralGrid(std::size_t resolution) : n_(resolution), nk_(resolution / 2 + 1) {
    std::vector<double> real(n_ * n_);
    std::vector<Complex> spec(n_ * nk_);
    std::lock_guard lock(planner_mutex());
    const int n = static_cast<int>(n_);
    forward_ = fftw_plan_dft_r2c_2d(n, n, real.data(), reinterpret_cast<fftw_complex*>(spec.data()), FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_2d(n, n, reinterpret_cast<fftw_complex*>(spec.data()), real.data(), FFTW_ESTIMATE);
    if (!forward_ || !inverse_) throw Error("fftw: plan creation failed");
  }
  ~SpectralGrid() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
  }
  SpectralGrid(const SpectralGrid&) = delete;
  SpectralGrid& operator=(const SpectralGrid&) = delete;

  std::size_t resolution() const { return n_; }
  std::size_t spectrum_size() const { return n_ * nk_; }
  std::size_t kx_count() const { return nk_; }

  /// Signed wavenumbers of spectrum entry (row, col).
  double kx(std::size_t col) const { return static_cast<double>(col); }
  double ky(std::size_t row) const {
    return row <= n_ / 2 ? static_cast<double>(row) : static_cast<double>(row) - static_cast<double>(n_);
  }
  /// Derivative wavenumbers with the Nyquist entry zeroed.
  double dkx(std::size_t col) const { return col == n_ / 2 ? 0.0 : kx(col); }
  double dky(std::size_t row) const { return row == n_ / 2 ? 0.0 : ky(row); }

  /// Unnormalized forward transform.
  std::vector<Complex> forward(const std::vector<double>& field) const {
    std::vector<double> in = field;
    std::vector<Complex> out(spectrum_size());
    fftw_execute_dft_r2c(forward_, in.data(), reinterpret_cast<fftw_complex*>(out.data()));
    return out;
  }

  /// Inverse transform including the 1/R^2 normalization.
  std::vector<double> inverse(const std::vector<Complex>& spectrum) const {
    std::vector<Complex> in = spectrum;  // c2r destroys its input
    std::vector<double> out(n_ * n_);
    fftw_execute_dft_c2r(inverse_, reinterpret_cast<fftw_complex*>(in.data()), out.data());
    const double scale = 1.0 / static_cast<double>(n_ * n_);
    for (auto& v : out) v *= scale;
    return out;
  }

 private:
  static std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
  }

  std::size_t n_;
  std::size_t nk_;
  fftw_plan forward_ = nullptr;
  fftw_plan inverse_ = nullptr;
};

/// Max pointwise |du/dx + dv/dy|, derivatives taken spectrally.
inline double spectral_divergence(const SpectralGrid& grid, const std::vector<double>& u, const std::vector<double>& v) {
  const auto uh = grid.forward(u);
  const auto vh = grid.forward(v);
  std::vector<SpectralGrid::Complex> div(grid.spectrum_size());
  const SpectralGrid::Complex i1(0.0, 1.0);
  for (std::size_t r = 0; r < grid.resolution(); ++r)
    for (std::size_t c = 0; c < grid.kx_count(); ++c) {
      const std::size_t k = r * grid.kx_count() + c;
      div[k] = i1 * grid.dkx(c) * uh[k] + i1 * grid.dky(r) * vh[k];
    }
  double worst = 0.0;
  for (double d : grid.inverse(div)) worst = std::max(worst, std::abs(d));
  return worst;
}

}  // namespace bcat
