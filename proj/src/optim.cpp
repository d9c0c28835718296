#include "paml/optim.hpp"

#include <cmath>

namespace paml {

double step_lr(double base, std::size_t epoch, std::size_t decay_epoch) {
  return epoch < decay_epoch ? base : base / 10.0;
}

AdamW::AdamW(ParamStore& params, const AdamWConfig& config) : params_(&params), config_(config) {
  for (const auto& e : params.entries()) {
    m_.emplace_back(e.tensor.numel(), 0.0);
    v_.emplace_back(e.tensor.numel(), 0.0);
  }
  t_.assign(params.size(), 0);
}

bool AdamW::step(double lr) {
  const auto& entries = params_->entries();
  if (entries.size() != m_.size()) throw ConfigError("optimizer built for a different parameter set");
  for (const auto& e : entries) {
    if (!e.tensor.has_grad()) continue;
    for (double g : e.tensor.grad()) {
      if (!std::isfinite(g)) {
        ++skipped_;
        return false;
      }
    }
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor p = entries[i].tensor;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const auto t = static_cast<double>(++t_[i]);
    const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
      w[j] -= lr * (update + config_.weight_decay * w[j]);
    }
  }
  ++steps_;
  return true;
}

void AdamW::set_state(std::vector<std::vector<double>> m, std::vector<std::vector<double>> v,
                      std::vector<std::uint64_t> t, std::uint64_t steps, std::uint64_t skipped) {
  if (m.size() != m_.size() || v.size() != v_.size() || t.size() != t_.size()) {
    throw DimensionError("optimizer state does not match the parameter set");
  }
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i].size() != m_[i].size() || v[i].size() != v_[i].size()) {
      throw DimensionError("optimizer moment size mismatch for " + params_->entries()[i].name);
    }
  }
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = std::move(t);
  steps_ = steps;
  skipped_ = skipped;
}

}  // namespace paml
