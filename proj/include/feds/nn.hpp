#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "feds/autograd.hpp"

namespace feds {

// Deterministic RNG. mt19937_64 output is fixed by the standard; the
// real-valued conversions below are done by hand so draws are identical
// across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }
  double normal();

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Mixes a seed with stream identifiers into an independent 64-bit seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

// Named, insertion-ordered set of trainable arrays.
class ParameterStore {
 public:
  Var& create(const std::string& name, Tensor init);
  Var& at(const std::string& name);
  const Var& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.contains(name); }

  const std::vector<std::string>& names() const { return order_; }
  std::vector<Var> all() const;
  std::size_t size() const { return order_.size(); }
  std::size_t parameter_count() const;
  std::size_t parameter_count(const std::string& prefix) const;

  void set_trainable(bool on);
  void zero_grad();
  // Order-dependent 64-bit FNV-1a over names, shapes and raw bytes.
  std::uint64_t checksum() const;

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Var> vars_;
};

namespace init {
Tensor uniform(const Shape& shape, double bound, Rng& rng);
Tensor conv_weight(int cout, int cin, int k, Rng& rng);
Tensor conv_transpose_weight(int cin, int cout, int k, Rng& rng);
Tensor bias(int n, int fan_in, Rng& rng);
}  // namespace init

// Thin layer helpers: create parameters under `prefix` and apply them.
namespace layers {
void make_conv(ParameterStore& store, const std::string& prefix, int cin, int cout, int k, Rng& rng);
Var conv(const ParameterStore& store, const std::string& prefix, const Var& x, int stride);

void make_deconv(ParameterStore& store, const std::string& prefix, int cin, int cout, int k, Rng& rng);
// Stride-2 transposed convolution doubling the spatial size.
Var deconv(const ParameterStore& store, const std::string& prefix, const Var& x);

void make_linear(ParameterStore& store, const std::string& prefix, int in, int out, Rng& rng);
Var linear(const ParameterStore& store, const std::string& prefix, const Var& x);

void make_layer_norm(ParameterStore& store, const std::string& prefix, int dim);
Var layer_norm(const ParameterStore& store, const std::string& prefix, const Var& x);
}  // namespace layers

}  // namespace feds
