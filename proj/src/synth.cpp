#include "gridstab/synth.hpp"

#include <cmath>
#include <complex>
#include <limits>
#include <vector>

#include "gridstab/random.hpp"

namespace gridstab::synth {

namespace {

using cplx = std::complex<double>;

struct Model {
  std::array<double, kNodes> tau;
  std::array<double, kNodes> g;
  std::array<double, 3> w;  // consumer line stiffness
  double damping;
  double window;

  // det(diag(lambda h_j) + L) / lambda with h_j = lambda + damping + g_j e^{-lambda tau_j};
  // dividing out lambda removes the trivial phase-shift root.
  cplx reduced_det(cplx z) const {
    std::array<cplx, kNodes> h;
    // Frequency response of the moving average over the last `window` seconds.
    const cplx avg = window > 0.0 ? (std::abs(z * window) < 1e-8 ? cplx(1.0) : (1.0 - std::exp(-z * window)) / (z * window))
                                  : cplx(1.0);
    for (std::size_t j = 0; j < kNodes; ++j) h[j] = z + damping + g[j] * std::exp(-z * tau[j]) * avg;
    std::array<cplx, 3> a;
    for (std::size_t j = 0; j < 3; ++j) a[j] = z * h[j + 1] + w[j];
    cplx value = h[0] * a[0] * a[1] * a[2];
    value += w[0] * h[1] * a[1] * a[2];
    value += w[1] * h[2] * a[0] * a[2];
    value += w[2] * h[3] * a[0] * a[1];
    return value;
  }
};

}  // namespace

double stability_value(const std::array<double, kNodes>& tau, const std::array<double, kNodes>& p,
                       const std::array<double, kNodes>& g, const DsgcParams& params) {
  Model m{tau, g, {}, params.damping, params.averaging_window};
  for (std::size_t j = 0; j < 3; ++j) {
    const double ratio = p[j + 1] / params.coupling;
    m.w[j] = params.coupling * std::sqrt(1.0 - ratio * ratio);
  }

  double rightmost = -std::numeric_limits<double>::infinity();
  constexpr double kStep = 1e-7;
  for (double re : {-0.4, -0.1, 0.2}) {
    for (int k = 0; k <= 32; ++k) {
      cplx z(re, 0.25 * k);
      for (int it = 0; it < 60; ++it) {
        const cplx f = m.reduced_det(z);
        const cplx df = (m.reduced_det(z + kStep) - m.reduced_det(z - kStep)) / (2.0 * kStep);
        if (std::abs(df) == 0.0) break;
        const cplx delta = f / df;
        z -= delta;
        if (std::abs(z) > 40.0 || !std::isfinite(z.real())) break;
        if (std::abs(delta) < 1e-12) {
          rightmost = std::max(rightmost, z.real());
          break;
        }
      }
    }
  }
  return rightmost;
}

Dataset generate(std::size_t n, std::uint64_t seed, const DsgcParams& params) {
  Rng rng(seed);
  std::vector<GridRecord> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    GridRecord r;
    for (auto& t : r.tau) t = rng.uniform(0.5, 10.0);
    double consumed = 0.0;
    for (std::size_t j = 1; j < kNodes; ++j) {
      r.p[j] = rng.uniform(-2.0, -0.5);
      consumed += r.p[j];
    }
    r.p[0] = -consumed;
    for (auto& e : r.g) e = rng.uniform(0.05, 1.0);
    r.stab = stability_value(r.tau, r.p, r.g, params);
    r.stabf = r.stab > 0.0 ? Label::Unstable : Label::Stable;
    rows.push_back(r);
  }
  return Dataset(std::move(rows));
}

}  // namespace gridstab::synth
