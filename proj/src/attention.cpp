#include "paml/attention.hpp"

#include <cmath>

namespace paml {

void AttentionConfig::validate() const {
  if (heads == 0 || model_dim == 0 || model_dim % heads != 0) {
    throw ConfigError("attention: model_dim " + std::to_string(model_dim) +
                      " must be a positive multiple of heads " + std::to_string(heads));
  }
}

std::vector<double> AttentionResult::mean_weights() const {
  if (weights.empty()) return {};
  std::vector<double> out(weights[0].numel(), 0.0);
  for (const Tensor& w : weights) {
    const auto v = w.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  for (double& x : out) x /= static_cast<double>(weights.size());
  return out;
}

AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const Tensor& mask) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw DimensionError("attention: q, k, v must be rank 2");
  }
  if (q.dim(1) != k.dim(1)) {
    throw DimensionError("attention: d_k mismatch between q " + shape_str(q.shape()) + " and k " +
                         shape_str(k.shape()));
  }
  if (k.dim(0) != v.dim(0)) {
    throw DimensionError("attention: key/value token counts differ: " + shape_str(k.shape()) +
                         " vs " + shape_str(v.shape()));
  }
  Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  if (mask.defined()) logits = add(logits, mask);
  Tensor weights = softmax(logits, 1);
  return {matmul(weights, v), {weights}};
}

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name,
                                       AttentionConfig config, std::size_t q_in, std::size_t k_in,
                                       std::size_t v_in, Rng& rng)
    : config_(config) {
  config_.validate();
  const std::size_t d = config_.model_dim;
  wq = Linear(store, name + ".q", q_in, d, rng);
  wk = Linear(store, name + ".k", k_in, d, rng);
  wv = Linear(store, name + ".v", v_in, d, rng);
  wo = Linear(store, name + ".out", d, d, rng);
}

namespace {

struct Projected {
  Tensor q, k, v;
};

Projected project(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src,
                  const MultiHeadAttention& attn) {
  if (k_src.rank() != 2 || v_src.rank() != 2 || q_src.rank() != 2) {
    throw DimensionError("attention: sources must be rank 2");
  }
  if (k_src.dim(0) != v_src.dim(0)) {
    throw DimensionError("attention: key/value token counts differ: " +
                         shape_str(k_src.shape()) + " vs " + shape_str(v_src.shape()));
  }
  return {attn.wq(q_src), attn.wk(k_src), attn.wv(v_src)};
}

AttentionResult attend_heads(const Projected& p, const MultiHeadAttention& attn,
                             const std::vector<Tensor>& bias) {
  const std::size_t heads = attn.config().heads;
  const std::size_t hd = attn.config().head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> outputs;
  AttentionResult result;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? p.q : slice(p.q, 1, h * hd, hd);
    const Tensor kh = heads == 1 ? p.k : slice(p.k, 1, h * hd, hd);
    const Tensor vh = heads == 1 ? p.v : slice(p.v, 1, h * hd, hd);
    const Tensor mask = bias.empty() ? Tensor{} : scale(bias[h], inv_sqrt);
    AttentionResult r = scaled_dot_attention(qh, kh, vh, mask);
    outputs.push_back(r.output);
    result.weights.push_back(r.weights[0]);
  }
  const Tensor merged = heads == 1 ? outputs[0] : concat(outputs, 1);
  result.output = attn.wo(merged);
  return result;
}

}  // namespace

AttentionResult mha(const Tensor& x, const MultiHeadAttention& attn) {
  return mca(x, x, x, attn);
}

AttentionResult mca(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src,
                    const MultiHeadAttention& attn) {
  return attend_heads(project(q_src, k_src, v_src, attn), attn, {});
}

GridMask GridMask::all_ones(std::size_t height, std::size_t width) {
  return {height, width, std::vector<std::uint8_t>(height * width, 1)};
}

RpeTable::RpeTable(ParamStore& store, const std::string& name, std::size_t model_dim,
                   std::size_t max_extent_, Rng& rng, bool learnable)
    : max_extent(max_extent_) {
  if (model_dim % 2 != 0) throw ConfigError("rpe: model_dim must be even");
  if (max_extent == 0) throw ConfigError("rpe: max_extent must be positive");
  const std::size_t rows = range(), cols = model_dim / 2;
  p_y = store.add(name + ".p_y", {rows, cols}, xavier_uniform(rng, rows, cols, rows * cols));
  p_x = store.add(name + ".p_x", {rows, cols}, xavier_uniform(rng, rows, cols, rows * cols));
  if (!learnable) {
    p_y.set_requires_grad(false);
    p_x.set_requires_grad(false);
  }
}

RelativePositions relative_positions(const GridMask& mask, std::size_t offset,
                                     std::size_t range) {
  const std::size_t h = mask.height, w = mask.width, n = h * w;
  if (mask.valid.size() != n) throw DimensionError("grid mask size does not match its extents");
  RelativePositions pos;
  pos.yy.assign(n, 0);
  pos.xx.assign(n, 0);
  for (std::size_t i = 0; i < h; ++i) {
    std::int64_t run = 0;
    for (std::size_t j = 0; j < w; ++j) {
      run += mask.valid[i * w + j] ? 1 : 0;
      pos.yy[i * w + j] = run;
    }
  }
  for (std::size_t j = 0; j < w; ++j) {
    std::int64_t run = 0;
    for (std::size_t i = 0; i < h; ++i) {
      run += mask.valid[i * w + j] ? 1 : 0;
      pos.xx[i * w + j] = run;
    }
  }
  pos.index_y.resize(n * n);
  pos.index_x.resize(n * n);
  const auto off = static_cast<std::int64_t>(offset);
  const auto lim = static_cast<std::int64_t>(range);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      const std::int64_t iy = pos.yy[a] - pos.yy[b] + off;
      const std::int64_t ix = pos.xx[a] - pos.xx[b] + off;
      if (iy < 0 || iy >= lim || ix < 0 || ix >= lim) {
        throw ConfigError("relative position index outside table range " + std::to_string(range) +
                          "; a " + std::to_string(h) + "x" + std::to_string(w) +
                          " grid needs max_extent >= " + std::to_string(std::max(h, w)));
      }
      pos.index_y[a * n + b] = static_cast<std::size_t>(iy);
      pos.index_x[a * n + b] = static_cast<std::size_t>(ix);
    }
  }
  return pos;
}

std::vector<Tensor> relative_position_bias(const GridMask& mask, std::span<const Tensor> q_heads,
                                           const MultiHeadAttention& attn, const RpeTable& rpe) {
  const std::size_t d = attn.config().model_dim;
  const std::size_t hd = attn.config().head_dim();
  const std::size_t n = mask.tokens();
  if (attn.wk.in_features() != d) {
    throw ConfigError("rpe: key source width must equal model_dim");
  }
  if (q_heads.size() != attn.config().heads) {
    throw DimensionError("rpe: expected one query block per head");
  }
  const RelativePositions pos = relative_positions(mask, rpe.offset(), rpe.range());
  // Tables enter the key projection through the matching half of its input rows.
  const Tensor k_y = matmul(rpe.p_y, slice(attn.wk.weight, 0, 0, d / 2));
  const Tensor k_x = matmul(rpe.p_x, slice(attn.wk.weight, 0, d / 2, d / 2));
  std::vector<Tensor> bias;
  for (std::size_t h = 0; h < q_heads.size(); ++h) {
    const Tensor& q = q_heads[h];
    if (q.rank() != 2 || q.dim(0) != n || q.dim(1) != hd) {
      throw DimensionError("rpe: query block " + shape_str(q.shape()) + " does not match " +
                           std::to_string(n) + " tokens x head_dim " + std::to_string(hd));
    }
    const Tensor ky = q_heads.size() == 1 ? k_y : slice(k_y, 1, h * hd, hd);
    const Tensor kx = q_heads.size() == 1 ? k_x : slice(k_x, 1, h * hd, hd);
    const Tensor raw_y = matmul(q, transpose(ky));  // [HW × range]
    const Tensor raw_x = matmul(q, transpose(kx));
    bias.push_back(add(gather_cols(raw_y, pos.index_y, n), gather_cols(raw_x, pos.index_x, n)));
  }
  return bias;
}

AttentionResult mharpe(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src,
                       const GridMask& mask, const MultiHeadAttention& attn, const RpeTable& rpe) {
  const std::size_t n = mask.tokens();
  if (q_src.rank() != 2 || k_src.rank() != 2 || q_src.dim(0) != n || k_src.dim(0) != n) {
    throw DimensionError("mharpe: token counts " + shape_str(q_src.shape()) + "/" +
                         shape_str(k_src.shape()) + " do not match a " +
                         std::to_string(mask.height) + "x" + std::to_string(mask.width) + " grid");
  }
  const Projected p = project(q_src, k_src, v_src, attn);
  const std::size_t heads = attn.config().heads, hd = attn.config().head_dim();
  std::vector<Tensor> q_heads;
  for (std::size_t h = 0; h < heads; ++h) {
    q_heads.push_back(heads == 1 ? p.q : slice(p.q, 1, h * hd, hd));
  }
  const std::vector<Tensor> bias = relative_position_bias(mask, q_heads, attn, rpe);
  return attend_heads(p, attn, bias);
}

}  // namespace paml
