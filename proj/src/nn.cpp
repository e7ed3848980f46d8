#include "feds/nn.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>

namespace feds {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
  has_spare_ = true;
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  // splitmix64 finalizer over the combined words
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(seed);
  h = mix(h ^ a);
  h = mix(h ^ b);
  h = mix(h ^ c);
  return h;
}

Var& ParameterStore::create(const std::string& name, Tensor init) {
  if (index_.contains(name)) throw std::logic_error("duplicate parameter name: " + name);
  index_.emplace(name, vars_.size());
  order_.push_back(name);
  vars_.emplace_back(std::move(init), true);
  return vars_.back();
}

Var& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return vars_[it->second];
}

const Var& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return vars_[it->second];
}

std::vector<Var> ParameterStore::all() const { return vars_; }

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& v : vars_) n += v.numel();
  return n;
}

std::size_t ParameterStore::parameter_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < order_.size(); ++i) {
    if (order_[i].starts_with(prefix)) n += vars_[i].numel();
  }
  return n;
}

void ParameterStore::set_trainable(bool on) {
  for (auto& v : vars_) v.set_requires_grad(on);
}

void ParameterStore::zero_grad() {
  for (auto& v : vars_) v.zero_grad();
}

std::uint64_t ParameterStore::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < order_.size(); ++i) {
    feed(order_[i].data(), order_[i].size());
    const auto& t = vars_[i].value();
    feed(t.shape.data(), t.shape.size() * sizeof(int));
    feed(t.data.data(), t.data.size() * sizeof(double));
  }
  return h;
}

namespace init {

Tensor uniform(const Shape& shape, double bound, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

Tensor conv_weight(int cout, int cin, int k, Rng& rng) {
  return uniform(Shape{cout, cin, k, k}, 1.0 / std::sqrt(static_cast<double>(cin * k * k)), rng);
}

Tensor conv_transpose_weight(int cin, int cout, int k, Rng& rng) {
  return uniform(Shape{cin, cout, k, k}, 1.0 / std::sqrt(static_cast<double>(cout * k * k)), rng);
}

Tensor bias(int n, int fan_in, Rng& rng) {
  return uniform(Shape{n}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace init

namespace layers {

void make_conv(ParameterStore& store, const std::string& prefix, int cin, int cout, int k, Rng& rng) {
  store.create(prefix + ".weight", init::conv_weight(cout, cin, k, rng));
  store.create(prefix + ".bias", init::bias(cout, cin * k * k, rng));
}

Var conv(const ParameterStore& store, const std::string& prefix, const Var& x, int stride) {
  const Var& w = store.at(prefix + ".weight");
  const int k = w.shape()[2];
  return ops::conv2d(x, w, store.at(prefix + ".bias"), stride, k / 2, k / 2);
}

void make_deconv(ParameterStore& store, const std::string& prefix, int cin, int cout, int k, Rng& rng) {
  store.create(prefix + ".weight", init::conv_transpose_weight(cin, cout, k, rng));
  store.create(prefix + ".bias", init::bias(cout, cout * k * k, rng));
}

Var deconv(const ParameterStore& store, const std::string& prefix, const Var& x) {
  const Var& w = store.at(prefix + ".weight");
  const int k = w.shape()[2];
  return ops::conv_transpose2d(x, w, store.at(prefix + ".bias"), 2, k / 2, 1);
}

void make_linear(ParameterStore& store, const std::string& prefix, int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  store.create(prefix + ".weight", init::uniform(Shape{out, in}, bound, rng));
  store.create(prefix + ".bias", init::uniform(Shape{out}, bound, rng));
}

Var linear(const ParameterStore& store, const std::string& prefix, const Var& x) {
  return ops::linear(x, store.at(prefix + ".weight"), store.at(prefix + ".bias"));
}

void make_layer_norm(ParameterStore& store, const std::string& prefix, int dim) {
  store.create(prefix + ".gamma", Tensor(Shape{dim}, 1.0));
  store.create(prefix + ".beta", Tensor(Shape{dim}, 0.0));
}

Var layer_norm(const ParameterStore& store, const std::string& prefix, const Var& x) {
  return ops::layer_norm(x, store.at(prefix + ".gamma"), store.at(prefix + ".beta"), 1e-5);
}

}  // namespace layers
}  // namespace feds
