#pragma once

#include <string>

#include "paml/attention.hpp"
#include "paml/encoder.hpp"
#include "paml/nn.hpp"

namespace paml {

// How the per-token gate φ_v is formed from the two similarity transforms.
enum class TransformMode {
  Gaussian,        // φ_v = φ_G
  Laplacian,       // φ_v = φ_L
  BlendFixed,      // λ = 0.5, no gradient
  BlendLearnable,  // λ = sigmoid(λ_raw)
};

TransformMode parse_transform_mode(const std::string& name);
std::string to_string(TransformMode mode);

struct VdfeConfig {
  std::size_t in_dim = 64;  // C0
  std::size_t dim = 32;     // C
  std::size_t heads = 2;
  std::size_t max_extent = 10;
  TransformMode mode = TransformMode::BlendLearnable;
  double sigma_init = 0.5;
  double b_init = 1.0;
  double lambda_init = 0.5;
};

/// Per-token cosine similarity of matching rows, [N × 1]. Row norms are
/// floored at 1e-12.
Tensor similarity_score(const Tensor& a, const Tensor& b);
/// exp(−(1 − φ²)/(2σ²)); `sigma` is a single-element tensor.
Tensor gaussian_transform(const Tensor& sim, const Tensor& sigma);
/// exp(−|1 − φ|/b); `b` is a single-element tensor.
Tensor laplacian_transform(const Tensor& sim, const Tensor& b);
/// λ·φ_G + (1 − λ)·φ_L.
Tensor blend(const Tensor& phi_g, const Tensor& phi_l, const Tensor& lambda);
/// (f_lcinfo·α) ⊙ f_v + f_lcinfo·β, with α and β acting on the feature axis.
Tensor modulate(const Tensor& f_lcinfo, const Tensor& f_v, const Tensor& alpha,
                const Tensor& beta);
/// (norm_v(f_v) + norm_lcv(f_lcv)) gated per token by φ_v.
Tensor discriminative_features(const Tensor& f_v, const Tensor& f_lcv, const Tensor& phi_v,
                               const LayerNorm& norm_v, const LayerNorm& norm_lcv);

struct VdfeOutput {
  Tensor f_v;      // projected visual tokens [N × C]
  Tensor f_l;      // projected text tokens [L × C]
  Tensor f_linfo;  // [N × C]
  Tensor phi_sim;  // [N × 1]
  Tensor phi_v;    // [N × 1]
  Tensor f_lcinfo;
  Tensor f_mv;
  Tensor f_lcv;
  Tensor f_disv;   // [N × C]
  Tensor fused;    // f_v ‖ f_disv, [N × 2C]
};

/// Language-guided visual feature encoder: highlights tokens that agree with
/// the expression and damps the rest.
class Vdfe {
 public:
  Vdfe() = default;
  Vdfe(ParamStore& store, const std::string& name, const VdfeConfig& config, Rng& rng);

  VdfeOutput operator()(const TokenGrid& f_v, const Tensor& f_l) const;

  Tensor language_info(const Tensor& f_v_proj, const Tensor& f_l_proj) const;
  Tensor contextualize(const Tensor& f_mv, const Tensor& f_v_proj, const GridMask& mask) const;

  Tensor sigma() const { return softplus(sigma_raw); }
  Tensor b() const { return softplus(b_raw); }
  /// λ as used by the configured mode.
  Tensor lambda() const;
  const VdfeConfig& config() const { return config_; }
  void set_mode(TransformMode mode) { config_.mode = mode; }

  Linear proj_v;
  Linear proj_l;
  MultiHeadAttention mca1;
  MultiHeadAttention mca2;
  MultiHeadAttention context_attn;
  RpeTable rpe;
  Tensor sigma_raw;
  Tensor b_raw;
  Tensor lambda_raw;
  Tensor alpha;
  Tensor beta;
  LayerNorm norm_v;
  LayerNorm norm_lcv;

 private:
  VdfeConfig config_;
};

}  // namespace paml
