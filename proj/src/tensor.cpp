#include "feds/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace feds {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_numel(shape)) {
    throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape));
  }
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape != b.shape) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  }
}

}  // namespace feds
