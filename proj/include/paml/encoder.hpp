#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "paml/attention.hpp"
#include "paml/nn.hpp"
#include "paml/tensor.hpp"

namespace paml {

/// Visual tokens [N × C] laid out row-major on an H×W grid.
struct TokenGrid {
  Tensor tokens;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return height * width; }
  void validate() const;
};

struct TextFeatures {
  Tensor tokens;  // [L × C]
  std::vector<std::size_t> token_ids;
};

/// Channel-major image, values in [0, 1].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
};

enum class InterpolationMode { Linear1D, Bilinear2D };

InterpolationMode parse_interpolation_mode(const std::string& name);
std::string to_string(InterpolationMode mode);

struct EncoderConfig {
  std::size_t image_size = 64;
  std::size_t patch = 8;
  std::size_t dim = 64;  // C0
  std::size_t heads = 2;
  std::size_t depth = 2;
  std::size_t ffn_dim = 128;
  std::size_t grid_tokens = 100;  // after interpolation
  std::size_t vocab_size = 32;
  std::size_t text_len = 12;
  InterpolationMode interpolation = InterpolationMode::Linear1D;
};

/// Non-overlapping patches flattened channel-major and projected to C0.
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(ParamStore& store, const std::string& name, std::size_t channels, std::size_t patch,
             std::size_t dim, Rng& rng);

  TokenGrid operator()(const Image& image) const;
  std::size_t patch() const { return patch_; }

  Linear proj;

 private:
  std::size_t patch_ = 0;
};

/// Resamples a token sequence to `target` tokens with endpoints preserved.
/// Linear1D treats tokens as one sequence; Bilinear2D resamples the grid.
/// With `require_grid`, `target` must be a perfect square.
TokenGrid interpolate_tokens(const TokenGrid& grid, std::size_t target,
                             InterpolationMode mode = InterpolationMode::Linear1D,
                             bool require_grid = true);

/// Constant [target × N] matrix M such that M·tokens is the resampled grid.
std::vector<double> interpolation_matrix(std::size_t height, std::size_t width, std::size_t target,
                                         InterpolationMode mode);

/// Post-norm self-attention block.
struct EncoderLayer {
  EncoderLayer() = default;
  EncoderLayer(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads,
               std::size_t ffn_dim, Rng& rng);

  Tensor operator()(const Tensor& x) const;

  MultiHeadAttention attn;
  LayerNorm norm1;
  FeedForward ffn;
  LayerNorm norm2;
};

/// Image → f_v: patch embedding, learned positions, self-attention layers,
/// then interpolation onto the output grid.
class VisualEncoder {
 public:
  VisualEncoder() = default;
  VisualEncoder(ParamStore& store, const std::string& name, const EncoderConfig& config, Rng& rng);

  TokenGrid operator()(const Image& image) const;

  PatchEmbed patch_embed;
  Tensor position;
  std::vector<EncoderLayer> layers;

 private:
  EncoderConfig config_;
};

/// Text self-attention, text→image cross-attention, FFN; each post-norm.
struct TextLayer {
  TextLayer() = default;
  TextLayer(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads,
            std::size_t ffn_dim, Rng& rng);

  Tensor operator()(const Tensor& text, const Tensor& image) const;

  MultiHeadAttention self_attn;
  LayerNorm norm1;
  MultiHeadAttention cross_attn;
  LayerNorm norm2;
  FeedForward ffn;
  LayerNorm norm3;
};

class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(ParamStore& store, const std::string& name, const EncoderConfig& config, Rng& rng);

  /// Word plus position embedding; throws DataError for unknown ids.
  Tensor embed(const std::vector<std::size_t>& ids) const;
  TextFeatures operator()(const std::vector<std::size_t>& ids, const TokenGrid& image) const;

  Tensor word;
  Tensor position;
  std::vector<TextLayer> layers;

 private:
  EncoderConfig config_;
};

}  // namespace paml
