#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "paml/tensor.hpp"

namespace paml {

/// splitmix64-seeded xoshiro256** generator. Distribution code is our own so
/// that a seed produces identical streams under any standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed);
  std::uint64_t next_u64();
  /// Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal();

  std::string serialize() const;
  void deserialize(const std::string& state);

  /// Stream derived from (seed, a, b) without touching any generator.
  static Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

 private:
  std::uint64_t s_[4]{};
};

std::vector<double> xavier_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out,
                                   std::size_t count);

/// Named registry of trainable leaves. Registration order is stable and
/// defines the checkpoint and optimizer layout.
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> values);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  struct Entry {
    std::string name;
    Tensor tensor;
  };
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// x·W + b with W stored [in × out]. A 1×1 convolution over a token grid is
/// the same map applied per token.
struct Linear {
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true);

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor weight;
  Tensor bias;
};

struct LayerNorm {
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t dim, double eps = 1e-5);

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }

  Tensor gain;
  Tensor bias;
  double eps = 1e-5;
};

/// linear → relu → linear.
struct FeedForward {
  FeedForward() = default;
  FeedForward(ParamStore& store, const std::string& name, std::size_t dim, std::size_t hidden,
              Rng& rng);

  Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }

  Linear fc1;
  Linear fc2;
};

}  // namespace paml
