#include "paml/encoder.hpp"

#include <cmath>

namespace paml {

namespace {

std::size_t exact_sqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  while (r * r > n) --r;
  while ((r + 1) * (r + 1) <= n) ++r;
  return r * r == n ? r : 0;
}

// Interpolation weights from `from` samples onto `to` samples, endpoints aligned.
void resample_weights(std::size_t from, std::size_t to, std::size_t j, std::size_t& lo,
                      double& frac) {
  if (to == 1 || from == 1) {
    lo = 0;
    frac = 0.0;
    return;
  }
  const double pos = static_cast<double>(j) * static_cast<double>(from - 1) /
                     static_cast<double>(to - 1);
  lo = std::min(static_cast<std::size_t>(std::floor(pos)), from - 1);
  frac = pos - static_cast<double>(lo);
  if (lo == from - 1) frac = 0.0;
}

std::vector<double> sinusoid(std::size_t count, std::size_t dim, std::size_t first_col,
                             std::size_t cols, const std::vector<double>& positions,
                             std::vector<double> out) {
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (c / 2)) /
                                                static_cast<double>(cols));
      const double angle = positions[i] * freq;
      out[i * dim + first_col + c] = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return out;
}

}  // namespace

void TokenGrid::validate() const {
  if (!tokens.defined() || tokens.rank() != 2) throw DimensionError("token grid needs [N x C]");
  if (tokens.dim(0) != height * width) {
    throw DimensionError("token grid: " + std::to_string(tokens.dim(0)) + " tokens on a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
}

InterpolationMode parse_interpolation_mode(const std::string& name) {
  if (name == "linear1d") return InterpolationMode::Linear1D;
  if (name == "bilinear2d") return InterpolationMode::Bilinear2D;
  throw ConfigError("unknown interpolation mode: " + name);
}

std::string to_string(InterpolationMode mode) {
  return mode == InterpolationMode::Linear1D ? "linear1d" : "bilinear2d";
}

PatchEmbed::PatchEmbed(ParamStore& store, const std::string& name, std::size_t channels,
                       std::size_t patch, std::size_t dim, Rng& rng)
    : proj(store, name, channels * patch * patch, dim, rng), patch_(patch) {
  if (patch == 0) throw ConfigError("patch size must be positive");
}

TokenGrid PatchEmbed::operator()(const Image& image) const {
  const std::size_t p = patch_;
  if (image.height == 0 || image.width == 0 || image.height % p != 0 || image.width % p != 0) {
    throw ConfigError("image " + std::to_string(image.height) + "x" +
                      std::to_string(image.width) + " is not divisible by patch " +
                      std::to_string(p));
  }
  if (image.pixels.size() != image.channels * image.height * image.width) {
    throw DimensionError("image pixel buffer does not match its extents");
  }
  const std::size_t gh = image.height / p, gw = image.width / p;
  const std::size_t feat = image.channels * p * p;
  if (feat != proj.in_features()) {
    throw DimensionError("patch of " + std::to_string(feat) + " values vs projection input " +
                         std::to_string(proj.in_features()));
  }
  std::vector<double> patches(gh * gw * feat);
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      double* row = patches.data() + (gy * gw + gx) * feat;
      std::size_t k = 0;
      for (std::size_t c = 0; c < image.channels; ++c) {
        for (std::size_t dy = 0; dy < p; ++dy) {
          for (std::size_t dx = 0; dx < p; ++dx) row[k++] = image.at(c, gy * p + dy, gx * p + dx);
        }
      }
    }
  }
  const Tensor flat = Tensor::constant({gh * gw, feat}, std::move(patches));
  return {proj(flat), gh, gw};
}

std::vector<double> interpolation_matrix(std::size_t height, std::size_t width, std::size_t target,
                                         InterpolationMode mode) {
  const std::size_t n = height * width;
  if (n < 2 || target < 2) throw ConfigError("interpolation needs at least 2 source and target tokens");
  std::vector<double> m(target * n, 0.0);
  if (mode == InterpolationMode::Linear1D) {
    for (std::size_t j = 0; j < target; ++j) {
      std::size_t lo = 0;
      double f = 0.0;
      resample_weights(n, target, j, lo, f);
      m[j * n + lo] += 1.0 - f;
      if (f > 0.0) m[j * n + lo + 1] += f;
    }
    return m;
  }
  const std::size_t side = exact_sqrt(target);
  if (side == 0) throw ConfigError("bilinear interpolation needs a square target, got " +
                                   std::to_string(target));
  for (std::size_t ty = 0; ty < side; ++ty) {
    std::size_t y0 = 0;
    double fy = 0.0;
    resample_weights(height, side, ty, y0, fy);
    for (std::size_t tx = 0; tx < side; ++tx) {
      std::size_t x0 = 0;
      double fx = 0.0;
      resample_weights(width, side, tx, x0, fx);
      double* row = m.data() + (ty * side + tx) * n;
      row[y0 * width + x0] += (1.0 - fy) * (1.0 - fx);
      if (fx > 0.0) row[y0 * width + x0 + 1] += (1.0 - fy) * fx;
      if (fy > 0.0) row[(y0 + 1) * width + x0] += fy * (1.0 - fx);
      if (fx > 0.0 && fy > 0.0) row[(y0 + 1) * width + x0 + 1] += fy * fx;
    }
  }
  return m;
}

TokenGrid interpolate_tokens(const TokenGrid& grid, std::size_t target, InterpolationMode mode,
                             bool require_grid) {
  grid.validate();
  const std::size_t side = exact_sqrt(target);
  if (require_grid && side == 0) {
    throw ConfigError("interpolation target " + std::to_string(target) +
                      " is not a perfect square; a grid is required downstream");
  }
  const Tensor weights = Tensor::constant(
      {target, grid.size()}, interpolation_matrix(grid.height, grid.width, target, mode));
  TokenGrid out{matmul(weights, grid.tokens), side, side};
  if (side == 0) {
    out.height = 1;
    out.width = target;
  }
  return out;
}

EncoderLayer::EncoderLayer(ParamStore& store, const std::string& name, std::size_t dim,
                           std::size_t heads, std::size_t ffn_dim, Rng& rng)
    : attn(store, name + ".attn", {dim, heads}, dim, dim, dim, rng),
      norm1(store, name + ".norm1", dim),
      ffn(store, name + ".ffn", dim, ffn_dim, rng),
      norm2(store, name + ".norm2", dim) {}

Tensor EncoderLayer::operator()(const Tensor& x) const {
  const Tensor h = norm1(add(x, mha(x, attn).output));
  return norm2(add(h, ffn(h)));
}

VisualEncoder::VisualEncoder(ParamStore& store, const std::string& name,
                             const EncoderConfig& config, Rng& rng)
    : config_(config) {
  if (config.image_size % config.patch != 0) {
    throw ConfigError("image_size must be divisible by patch");
  }
  patch_embed = PatchEmbed(store, name + ".patch", 3, config.patch, config.dim, rng);
  const std::size_t side = config.image_size / config.patch;
  const std::size_t n = side * side, d = config.dim;
  // 2-D sinusoidal start: first half of the features encodes rows, second half columns.
  std::vector<double> rows(n), cols(n);
  for (std::size_t i = 0; i < n; ++i) {
    rows[i] = static_cast<double>(i / side);
    cols[i] = static_cast<double>(i % side);
  }
  std::vector<double> table(n * d, 0.0);
  table = sinusoid(n, d, 0, d / 2, rows, std::move(table));
  table = sinusoid(n, d, d / 2, d - d / 2, cols, std::move(table));
  position = store.add(name + ".position", {n, d}, std::move(table));
  for (std::size_t l = 0; l < config.depth; ++l) {
    layers.emplace_back(store, name + ".layer" + std::to_string(l), d, config.heads,
                        config.ffn_dim, rng);
  }
}

TokenGrid VisualEncoder::operator()(const Image& image) const {
  TokenGrid g = patch_embed(image);
  Tensor x = add(g.tokens, position);
  for (const auto& layer : layers) x = layer(x);
  g.tokens = x;
  return interpolate_tokens(g, config_.grid_tokens, config_.interpolation);
}

TextLayer::TextLayer(ParamStore& store, const std::string& name, std::size_t dim,
                     std::size_t heads, std::size_t ffn_dim, Rng& rng)
    : self_attn(store, name + ".self", {dim, heads}, dim, dim, dim, rng),
      norm1(store, name + ".norm1", dim),
      cross_attn(store, name + ".cross", {dim, heads}, dim, dim, dim, rng),
      norm2(store, name + ".norm2", dim),
      ffn(store, name + ".ffn", dim, ffn_dim, rng),
      norm3(store, name + ".norm3", dim) {}

Tensor TextLayer::operator()(const Tensor& text, const Tensor& image) const {
  const Tensor a = norm1(add(text, mha(text, self_attn).output));
  const Tensor b = norm2(add(a, mca(a, image, image, cross_attn).output));
  return norm3(add(b, ffn(b)));
}

TextEncoder::TextEncoder(ParamStore& store, const std::string& name, const EncoderConfig& config,
                         Rng& rng)
    : config_(config) {
  const std::size_t v = config.vocab_size, d = config.dim, l = config.text_len;
  std::vector<double> table(v * d);
  for (double& x : table) x = rng.normal();
  word = store.add(name + ".word", {v, d}, std::move(table));
  std::vector<double> steps(l);
  for (std::size_t i = 0; i < l; ++i) steps[i] = static_cast<double>(i);
  position = store.add(name + ".position", {l, d},
                       sinusoid(l, d, 0, d, steps, std::vector<double>(l * d, 0.0)));
  for (std::size_t i = 0; i < config.depth; ++i) {
    layers.emplace_back(store, name + ".layer" + std::to_string(i), d, config.heads,
                        config.ffn_dim, rng);
  }
}

Tensor TextEncoder::embed(const std::vector<std::size_t>& ids) const {
  if (ids.size() != config_.text_len) {
    throw DataError("text has " + std::to_string(ids.size()) + " tokens, expected " +
                    std::to_string(config_.text_len));
  }
  for (std::size_t id : ids) {
    if (id >= config_.vocab_size) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(config_.vocab_size));
    }
  }
  return add(gather_rows(word, ids), position);
}

TextFeatures TextEncoder::operator()(const std::vector<std::size_t>& ids,
                                     const TokenGrid& image) const {
  image.validate();
  Tensor x = embed(ids);
  for (const auto& layer : layers) x = layer(x, image.tokens);
  return {x, ids};
}

}  // namespace paml
