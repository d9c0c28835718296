#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "paml/nn.hpp"
#include "paml/tensor.hpp"

namespace paml {

struct BankConfig {
  std::size_t size = 128;  // n_p
  std::size_t dim = 64;    // C1
  std::size_t k = 5;
  double decay = 0.4;      // α of the EMA
  double epsilon = 1e-5;   // Laplace smoothing
  double tau_init = 1.0;
  double tau_min = 1e-3;
};

/// Squared Euclidean distances [M × n_p] via ‖x‖² + ‖e‖² − 2x·e, with tiny
/// negative round-off clamped to zero. The result is a constant.
Tensor pairwise_sq_dist(const Tensor& x, const Tensor& e);

/// Indices of the k smallest distances per row, ordered by (distance, index).
struct Neighbors {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<std::size_t> index;  // [rows × k]

  std::span<const std::size_t> row(std::size_t i) const {
    return std::span<const std::size_t>(index).subspan(i * k, k);
  }
};

Neighbors topk_neighbors(const Tensor& d, std::size_t k);

/// Dense [M × n_p] weights: softmax of −d/τ over each row's neighbours, zero
/// elsewhere. Differentiable in `tau` only.
Tensor neighbor_weights(const Tensor& d, const Neighbors& neighbors, const Tensor& tau);
Tensor neighbor_weights(const Tensor& d, const Neighbors& neighbors, double tau);

/// EMA codebook with top-k soft inheritance.
///
/// Codebook, cluster sizes and running sums start at zero. Only ema_update()
/// changes them, and never through the tape.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  PrototypeBank(ParamStore& store, const std::string& name, const BankConfig& config);

  struct Assignment {
    Tensor distances;  // [M × n_p], constant
    Neighbors neighbors;
    Tensor weights;    // [M × n_p]
  };

  /// Distances, neighbours and weights against the current codebook.
  Assignment assign(const Tensor& x) const;

  /// One EMA step from token matrix `x` [M × C1] and weights `w` [M × n_p].
  void ema_update(const Tensor& x, const Tensor& w);

  /// Q = Σ_j w_ij E_j in the forward pass; the backward pass hands the
  /// upstream gradient to `x` unchanged. τ also receives gradient through the
  /// weights (distances and codebook held fixed); E receives none.
  Tensor inherit(const Tensor& x, const Tensor& weights) const;

  Tensor codebook() const;
  const std::vector<double>& codebook_values() const { return codebook_; }
  const std::vector<double>& cluster_size() const { return cluster_size_; }
  const std::vector<double>& running_sum() const { return running_sum_; }
  std::uint64_t updates() const { return updates_; }

  void set_state(std::vector<double> codebook, std::vector<double> cluster_size,
                 std::vector<double> running_sum, std::uint64_t updates);

  /// Keeps τ ≥ tau_min; call after each optimizer step.
  void clamp_tau();

  const BankConfig& config() const { return config_; }
  void set_k(std::size_t k);

  Tensor tau;

 private:
  BankConfig config_;
  std::vector<double> codebook_;      // E [n_p × C1]
  std::vector<double> cluster_size_;  // S [n_p]
  std::vector<double> running_sum_;   // C [n_p × C1]
  std::uint64_t updates_ = 0;
};

/// 1×1 convolutions around the bank: C → C1 before, 2·C1 → 2 gate, C1 → C after.
struct GateFusion {
  GateFusion() = default;
  GateFusion(ParamStore& store, const std::string& name, std::size_t dim, std::size_t bank_dim,
             Rng& rng);

  Linear up_conv;
  Linear gate;
  Linear out_conv;
};

struct GateOutput {
  Tensor f_q;  // [N × C]
  Tensor e_s;  // [N × 1] weight on the quantized path
  Tensor i_s;  // [N × 1] weight on the raw path
};

/// P = out_conv(f_in·I_s + f_qt·E_s) with [E_s, I_s] = softmax(gate(f_in ‖ f_qt)).
GateOutput gate_fuse(const Tensor& f_in, const Tensor& f_qt, const GateFusion& params);

struct PrototypeOutput {
  Tensor f_in;
  Tensor q;
  GateOutput gate;
};

/// Full bank stage over a batch: project every sample, assign against the
/// current codebook, update once with all tokens when training, then inherit
/// from the updated codebook and fuse.
std::vector<PrototypeOutput> prototype_stage(std::span<const Tensor> f_disv, PrototypeBank& bank,
                                             const GateFusion& params, bool train);

}  // namespace paml
