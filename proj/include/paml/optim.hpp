#pragma once

#include <cstdint>
#include <vector>

#include "paml/nn.hpp"

namespace paml {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Base rate until `decay_epoch`, a tenth of it afterwards.
double step_lr(double base, std::size_t epoch, std::size_t decay_epoch);

/// AdamW with decoupled weight decay. Parameters without a gradient this step
/// are left untouched, moments included.
class AdamW {
 public:
  AdamW(ParamStore& params, const AdamWConfig& config);

  /// Returns false and changes nothing when any gradient is non-finite.
  bool step(double lr);

  std::uint64_t steps() const { return steps_; }
  std::uint64_t skipped() const { return skipped_; }
  const AdamWConfig& config() const { return config_; }

  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  std::vector<std::uint64_t> param_steps() const { return t_; }
  void set_state(std::vector<std::vector<double>> m, std::vector<std::vector<double>> v,
                 std::vector<std::uint64_t> t, std::uint64_t steps, std::uint64_t skipped);

 private:
  ParamStore* params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::vector<std::uint64_t> t_;  // per-parameter update count for bias correction
  std::uint64_t steps_ = 0;
  std::uint64_t skipped_ = 0;
};

}  // namespace paml
