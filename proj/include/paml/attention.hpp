#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "paml/nn.hpp"
#include "paml/tensor.hpp"

namespace paml {

struct AttentionConfig {
  std::size_t model_dim = 32;
  std::size_t heads = 2;

  std::size_t head_dim() const { return model_dim / heads; }
  void validate() const;
};

struct AttentionResult {
  Tensor output;
  // One [n_q × n_k] row-stochastic matrix per head.
  std::vector<Tensor> weights;

  /// Head-averaged weights as plain values, row-major [n_q × n_k].
  std::vector<double> mean_weights() const;
};

/// softmax(q·kᵀ/√d_k + mask)·v. `mask`, when defined, is [n_q × n_k].
AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const Tensor& mask = {});

/// Projections for multi-head attention over possibly distinct query, key and
/// value sources. Key and value sources must have matching token counts.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, AttentionConfig config,
                     std::size_t q_in, std::size_t k_in, std::size_t v_in, Rng& rng);

  const AttentionConfig& config() const { return config_; }

  Linear wq;
  Linear wk;
  Linear wv;
  Linear wo;

 private:
  AttentionConfig config_;
};

AttentionResult mha(const Tensor& x, const MultiHeadAttention& attn);
AttentionResult mca(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src,
                    const MultiHeadAttention& attn);

/// 0/1 validity of each visual token laid out on an H×W grid.
struct GridMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> valid;

  static GridMask all_ones(std::size_t height, std::size_t width);
  std::size_t tokens() const { return height * width; }
};

/// Learnable row/column position tables for the additive attention bias.
/// Both tables have 2·max_extent − 1 rows and model_dim/2 columns; a relative
/// offset Δ reads row Δ + max_extent − 1.
struct RpeTable {
  RpeTable() = default;
  RpeTable(ParamStore& store, const std::string& name, std::size_t model_dim,
           std::size_t max_extent, Rng& rng, bool learnable = true);

  std::size_t offset() const { return max_extent - 1; }
  std::size_t range() const { return 2 * max_extent - 1; }

  Tensor p_y;
  Tensor p_x;
  std::size_t max_extent = 0;
};

/// Cumulative positions of a mask and the table indices they select.
struct RelativePositions {
  std::vector<std::int64_t> yy;  // flattened running count along each row
  std::vector<std::int64_t> xx;  // flattened running count down each column
  std::vector<std::size_t> index_y;  // [HW × HW], Δyy + offset
  std::vector<std::size_t> index_x;  // [HW × HW], Δxx + offset
};

RelativePositions relative_positions(const GridMask& mask, std::size_t offset, std::size_t range);

/// Per-head bias R_h [HW × HW] from head-split queries and the key projection.
std::vector<Tensor> relative_position_bias(const GridMask& mask, std::span<const Tensor> q_heads,
                                           const MultiHeadAttention& attn, const RpeTable& rpe);

/// softmax((Q·Kᵀ + R)/√d_k)·V per head, followed by the output projection.
AttentionResult mharpe(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src,
                       const GridMask& mask, const MultiHeadAttention& attn, const RpeTable& rpe);

}  // namespace paml
