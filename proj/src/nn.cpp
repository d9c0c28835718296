#include "paml/nn.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace paml {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

void Rng::reseed(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& s : s_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int: hi < lo");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(next_u64());
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return lo + static_cast<std::int64_t>(v % span);
}

double Rng::normal() {
  // Box-Muller; one value per call keeps the state trivially serializable.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << s_[0] << ' ' << s_[1] << ' ' << s_[2] << ' ' << s_[3];
  return os.str();
}

void Rng::deserialize(const std::string& state) {
  std::istringstream is(state);
  for (auto& s : s_) {
    if (!(is >> s)) throw std::invalid_argument("Rng::deserialize: malformed state");
  }
}

Rng Rng::derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = seed;
  std::uint64_t h = splitmix64(x);
  x = h ^ (a * 0xd1b54a32d192ed03ULL);
  h = splitmix64(x);
  x = h ^ (b * 0x8cb92ba72f3d8dd7ULL);
  return Rng(splitmix64(x));
}

std::vector<double> xavier_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out,
                                   std::size_t count) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(count);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

// ---------------------------------------------------------------------------

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Tensor t = Tensor::parameter(std::move(shape), std::move(values));
  index_[name] = entries_.size();
  entries_.push_back({name, t});
  return t;
}

Tensor ParamStore::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].tensor;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
               Rng& rng, bool with_bias) {
  weight = store.add(name + ".weight", {in, out}, xavier_uniform(rng, in, out, in * out));
  if (with_bias) bias = store.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, std::size_t dim, double eps_)
    : eps(eps_) {
  gain = store.add(name + ".gain", {dim}, std::vector<double>(dim, 1.0));
  bias = store.add(name + ".bias", {dim}, std::vector<double>(dim, 0.0));
}

FeedForward::FeedForward(ParamStore& store, const std::string& name, std::size_t dim,
                         std::size_t hidden, Rng& rng)
    : fc1(store, name + ".fc1", dim, hidden, rng), fc2(store, name + ".fc2", hidden, dim, rng) {}

}  // namespace paml
