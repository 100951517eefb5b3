#pragma once

#include <array>
#include <cstdint>

#include "gridstab/data.hpp"

namespace gridstab::synth {

// Linearised 4-node star model with delayed price response:
//   xi_j'' = -damping xi_j' - g_j avg_T[xi_j'](t - tau_j) - sum_k w_jk (xi_j - xi_k),
// where avg_T is a moving average over the last averaging_window seconds,
// w_j = sqrt(coupling^2 - p_j^2) is the line stiffness at the
// operating point. Stability value = real part of the rightmost
// non-trivial root of the characteristic function.
struct DsgcParams {
  double damping = 0.1;
  double coupling = 8.0;
  double averaging_window = 2.0;
};

double stability_value(const std::array<double, kNodes>& tau, const std::array<double, kNodes>& p,
                       const std::array<double, kNodes>& g, const DsgcParams& params = {});

// Draws tau ~ U[0.5, 10], consumer p ~ U[-2, -0.5], g ~ U[0.05, 1], balances
// the producer, and labels each row from its stability value.
Dataset generate(std::size_t n, std::uint64_t seed, const DsgcParams& params = {});

}  // namespace gridstab::synth
