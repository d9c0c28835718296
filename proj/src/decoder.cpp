#include "paml/decoder.hpp"

namespace paml {

DecoderLayer::DecoderLayer(ParamStore& store, const std::string& name, const DecoderConfig& config,
                           Rng& rng) {
  const std::size_t c = config.dim;
  const AttentionConfig attn{c, config.heads};
  mca_text = MultiHeadAttention(store, name + ".mca_text", attn, c, c, c, rng);
  mca_vision = MultiHeadAttention(store, name + ".mca_vision", attn, c, c, c, rng);
  norm_text = LayerNorm(store, name + ".norm_text", c);
  norm_vision = LayerNorm(store, name + ".norm_vision", c);
  norm_residual = LayerNorm(store, name + ".norm_residual", c);
  norm_ffn = LayerNorm(store, name + ".norm_ffn", c);
  ffn = FeedForward(store, name + ".ffn", c, config.ffn_dim, rng);
}

Tensor text_info(const Tensor& query, const Tensor& f_l, const DecoderLayer& layer) {
  return layer.norm_text(mca(query, f_l, f_l, layer.mca_text).output);
}

AttentionResult visual_info(const Tensor& t_info, const Tensor& f_q, const Tensor& f_v,
                            const DecoderLayer& layer) {
  if (f_q.rank() != 2 || f_v.rank() != 2 || f_q.dim(0) != f_v.dim(0)) {
    throw DimensionError("visual_info: keys " + shape_str(f_q.shape()) + " vs values " +
                         shape_str(f_v.shape()));
  }
  AttentionResult r = mca(t_info, f_q, f_v, layer.mca_vision);
  r.output = layer.norm_vision(r.output);
  return r;
}

StageOutput stage(const Tensor& query, const Tensor& f_l, const Tensor& f_q, const Tensor& f_v,
                  const DecoderLayer& layer) {
  const Tensor t = text_info(query, f_l, layer);
  const AttentionResult v = visual_info(t, f_q, f_v, layer);
  const Tensor f_vqt = layer.norm_residual(add(query, v.output));
  return {layer.norm_ffn(add(f_vqt, layer.ffn(f_vqt))), v.mean_weights()};
}

Decoder::Decoder(ParamStore& store, const std::string& name, const DecoderConfig& config, Rng& rng)
    : config_(config) {
  if (config.depth == 0) throw ConfigError("decoder depth must be positive");
  for (std::size_t i = 0; i < config.depth; ++i) {
    layers.emplace_back(store, name + ".layer" + std::to_string(i), config, rng);
  }
}

std::vector<StageOutput> Decoder::operator()(const Tensor& f_l, const Tensor& f_q,
                                             const Tensor& f_v) const {
  std::vector<StageOutput> out;
  out.reserve(layers.size());
  Tensor query = Tensor::zeros({1, config_.dim});
  for (const auto& layer : layers) {
    out.push_back(stage(query, f_l, f_q, f_v, layer));
    query = out.back().query;
  }
  return out;
}

}  // namespace paml
