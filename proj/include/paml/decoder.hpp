#pragma once

#include <string>
#include <vector>

#include "paml/attention.hpp"
#include "paml/nn.hpp"

namespace paml {

struct DecoderConfig {
  std::size_t dim = 32;  // C
  std::size_t heads = 2;
  std::size_t ffn_dim = 2048;
  std::size_t depth = 6;
};

/// One refinement step: the query reads the expression, then uses that
/// summary to read the visual tokens.
struct DecoderLayer {
  DecoderLayer() = default;
  DecoderLayer(ParamStore& store, const std::string& name, const DecoderConfig& config, Rng& rng);

  MultiHeadAttention mca_text;
  MultiHeadAttention mca_vision;
  LayerNorm norm_text;
  LayerNorm norm_vision;
  LayerNorm norm_residual;
  LayerNorm norm_ffn;
  FeedForward ffn;
};

/// Norm(MCA(query, f_l, f_l)), [1 × C].
Tensor text_info(const Tensor& query, const Tensor& f_l, const DecoderLayer& layer);

/// Norm(MCA(t_info, f_q, f_v)); keys from the prototype path, values from the
/// projected visual tokens.
AttentionResult visual_info(const Tensor& t_info, const Tensor& f_q, const Tensor& f_v,
                            const DecoderLayer& layer);

struct StageOutput {
  Tensor query;                 // [1 × C]
  std::vector<double> weights;  // head-averaged vision attention, [N]
};

StageOutput stage(const Tensor& query, const Tensor& f_l, const Tensor& f_q, const Tensor& f_v,
                  const DecoderLayer& layer);

class Decoder {
 public:
  Decoder() = default;
  Decoder(ParamStore& store, const std::string& name, const DecoderConfig& config, Rng& rng);

  /// Every stage output in order, starting from a zero query.
  std::vector<StageOutput> operator()(const Tensor& f_l, const Tensor& f_q,
                                      const Tensor& f_v) const;

  const DecoderConfig& config() const { return config_; }

  std::vector<DecoderLayer> layers;

 private:
  DecoderConfig config_;
};

}  // namespace paml
