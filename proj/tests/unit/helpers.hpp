#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include "feds/autograd.hpp"
#include "feds/nn.hpp"

namespace feds::testing {

inline Tensor batched(Tensor img) {
  img.shape.insert(img.shape.begin(), 1);
  return img;
}

inline Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline double rel_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// dL/dw[k] by central differences on one array entry
inline double central_difference(Var& w, std::size_t k, double h, const std::function<double()>& loss) {
  NoGradGuard g;
  double& slot = w.mutable_value().data[k];
  const double keep = slot;
  slot = keep + h;
  const double plus = loss();
  slot = keep - h;
  const double minus = loss();
  slot = keep;
  return (plus - minus) / (2.0 * h);
}

// fresh empty directory under the system temp dir
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("feds_unit_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace feds::testing
