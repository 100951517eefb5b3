#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gridstab/data.hpp"
#include "gridstab/random.hpp"

namespace testing {

using gridstab::GridRecord;
using gridstab::Label;

// A valid record with distinct consumers; p[0] balances the consumers.
inline GridRecord make_record(double stab = -0.01) {
  GridRecord r;
  r.tau = {1.0, 2.0, 3.0, 4.0};
  r.p = {3.0, -1.0, -1.5, -0.5};
  r.g = {0.1, 0.2, 0.3, 0.4};
  r.stab = stab;
  r.stabf = stab > 0 ? Label::Unstable : Label::Stable;
  return r;
}

// Uniform draws over the documented ranges; label from the sign of stab.
inline GridRecord random_record(gridstab::Rng& rng, double stab) {
  GridRecord r;
  for (auto& t : r.tau) t = rng.uniform(0.5, 10.0);
  for (auto& g : r.g) g = rng.uniform(0.05, 1.0);
  r.p[0] = 0.0;
  for (std::size_t i = 1; i < 4; ++i) {
    r.p[i] = rng.uniform(-2.0, -0.5);
    r.p[0] -= r.p[i];
  }
  r.stab = stab;
  r.stabf = stab > 0 ? Label::Unstable : Label::Stable;
  return r;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("gridstab_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
