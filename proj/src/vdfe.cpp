#include "paml/vdfe.hpp"

#include <cmath>

namespace paml {

namespace {

double inverse_softplus(double y) { return std::log(std::expm1(y)); }

Tensor one_minus(const Tensor& x) { return add_scalar(neg(x), 1.0); }

}  // namespace

TransformMode parse_transform_mode(const std::string& name) {
  if (name == "gaussian") return TransformMode::Gaussian;
  if (name == "laplacian") return TransformMode::Laplacian;
  if (name == "blend-fixed") return TransformMode::BlendFixed;
  if (name == "blend-learnable") return TransformMode::BlendLearnable;
  throw ConfigError("unknown transform_mode: " + name +
                    " (expected gaussian, laplacian, blend-fixed, blend-learnable)");
}

std::string to_string(TransformMode mode) {
  switch (mode) {
    case TransformMode::Gaussian: return "gaussian";
    case TransformMode::Laplacian: return "laplacian";
    case TransformMode::BlendFixed: return "blend-fixed";
    case TransformMode::BlendLearnable: return "blend-learnable";
  }
  return "unknown";
}

Tensor similarity_score(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2) {
    throw DimensionError("similarity_score: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  constexpr double kFloorSq = 1e-24;  // norm floor 1e-12
  const Tensor dot = sum(hadamard(a, b), 1);
  const Tensor na = sqrt(clamp_min(sum(square(a), 1), kFloorSq));
  const Tensor nb = sqrt(clamp_min(sum(square(b), 1), kFloorSq));
  return div(dot, hadamard(na, nb));
}

Tensor gaussian_transform(const Tensor& sim, const Tensor& sigma) {
  const Tensor two_var = scale(square(sigma), 2.0);
  return exp(neg(div(one_minus(square(sim)), two_var)));
}

Tensor laplacian_transform(const Tensor& sim, const Tensor& b) {
  return exp(neg(div(abs(one_minus(sim)), b)));
}

Tensor blend(const Tensor& phi_g, const Tensor& phi_l, const Tensor& lambda) {
  return add(hadamard(phi_g, lambda), hadamard(phi_l, one_minus(lambda)));
}

Tensor modulate(const Tensor& f_lcinfo, const Tensor& f_v, const Tensor& alpha,
                const Tensor& beta) {
  return add(hadamard(matmul(f_lcinfo, alpha), f_v), matmul(f_lcinfo, beta));
}

Tensor discriminative_features(const Tensor& f_v, const Tensor& f_lcv, const Tensor& phi_v,
                               const LayerNorm& norm_v, const LayerNorm& norm_lcv) {
  return mul_rows(add(norm_v(f_v), norm_lcv(f_lcv)), phi_v);
}

Vdfe::Vdfe(ParamStore& store, const std::string& name, const VdfeConfig& config, Rng& rng)
    : config_(config) {
  const std::size_t c0 = config.in_dim, c = config.dim;
  const AttentionConfig attn{c, config.heads};
  proj_v = Linear(store, name + ".proj_v", c0, c, rng);
  proj_l = Linear(store, name + ".proj_l", c0, c, rng);
  mca1 = MultiHeadAttention(store, name + ".mca1", attn, c, c, c, rng);
  mca2 = MultiHeadAttention(store, name + ".mca2", attn, c, c, c, rng);
  context_attn = MultiHeadAttention(store, name + ".context", attn, c, c, c, rng);
  rpe = RpeTable(store, name + ".rpe", c, config.max_extent, rng);
  sigma_raw = store.add(name + ".sigma_raw", {1}, {inverse_softplus(config.sigma_init)});
  b_raw = store.add(name + ".b_raw", {1}, {inverse_softplus(config.b_init)});
  const double l = config.lambda_init;
  lambda_raw = store.add(name + ".lambda_raw", {1}, {std::log(l / (1.0 - l))});
  alpha = store.add(name + ".alpha", {c, c}, xavier_uniform(rng, c, c, c * c));
  beta = store.add(name + ".beta", {c, c}, xavier_uniform(rng, c, c, c * c));
  norm_v = LayerNorm(store, name + ".norm_v", c);
  norm_lcv = LayerNorm(store, name + ".norm_lcv", c);
}

Tensor Vdfe::lambda() const {
  switch (config_.mode) {
    case TransformMode::Gaussian: return Tensor::scalar(1.0);
    case TransformMode::Laplacian: return Tensor::scalar(0.0);
    case TransformMode::BlendFixed: return Tensor::scalar(0.5);
    case TransformMode::BlendLearnable: return sigmoid(lambda_raw);
  }
  return {};
}

Tensor Vdfe::language_info(const Tensor& f_v_proj, const Tensor& f_l_proj) const {
  return mca(f_v_proj, f_l_proj, f_l_proj, mca1).output;
}

Tensor Vdfe::contextualize(const Tensor& f_mv, const Tensor& f_v_proj,
                           const GridMask& mask) const {
  return mharpe(f_mv, f_mv, f_v_proj, mask, context_attn, rpe).output;
}

VdfeOutput Vdfe::operator()(const TokenGrid& f_v, const Tensor& f_l) const {
  f_v.validate();
  VdfeOutput out;
  out.f_v = proj_v(f_v.tokens);
  out.f_l = proj_l(f_l);
  out.f_linfo = language_info(out.f_v, out.f_l);
  out.phi_sim = similarity_score(out.f_linfo, out.f_v);
  // Pinned modes skip the unused transform so its parameters stay off the tape.
  switch (config_.mode) {
    case TransformMode::Gaussian:
      out.phi_v = gaussian_transform(out.phi_sim, sigma());
      break;
    case TransformMode::Laplacian:
      out.phi_v = laplacian_transform(out.phi_sim, b());
      break;
    case TransformMode::BlendFixed:
    case TransformMode::BlendLearnable:
      out.phi_v = blend(gaussian_transform(out.phi_sim, sigma()),
                        laplacian_transform(out.phi_sim, b()), lambda());
      break;
  }
  out.f_lcinfo = mca(out.f_v, out.f_l, out.f_l, mca2).output;
  out.f_mv = modulate(out.f_lcinfo, out.f_v, alpha, beta);
  out.f_lcv = contextualize(out.f_mv, out.f_v, GridMask::all_ones(f_v.height, f_v.width));
  out.f_disv = discriminative_features(out.f_v, out.f_lcv, out.phi_v, norm_v, norm_lcv);
  out.fused = concat({out.f_v, out.f_disv}, 1);
  return out;
}

}  // namespace paml
