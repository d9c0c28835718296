#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "paml/encoder.hpp"
#include "paml/grounding_head.hpp"
#include "paml/nn.hpp"

namespace paml::synth {

inline const std::vector<std::string> kColors = {"red", "green", "blue", "yellow", "purple", "orange"};
inline const std::vector<std::string> kShapes = {"square", "circle", "triangle", "cross"};
inline const std::vector<std::string> kRelations = {"left of", "right of", "above",
                                                    "below", "bigger than", "smaller than"};

/// Fixed word list; [PAD] is 0 and [SEP] closes every expression.
class Vocabulary {
 public:
  Vocabulary();

  std::size_t size() const { return words_.size(); }
  std::size_t id(const std::string& word) const;
  const std::string& word(std::size_t id) const;
  const std::vector<std::string>& words() const { return words_; }

  /// Words, then [SEP], then [PAD] up to `length`.
  std::vector<std::size_t> encode(const std::string& expression, std::size_t length) const;

  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kSep = 1;

 private:
  std::vector<std::string> words_;
};

struct ShapeMeta {
  std::string color;
  std::string shape;
  int size = 0;
  // Tight pixel bounds, x1/y1 exclusive.
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

struct SceneMeta {
  std::vector<ShapeMeta> shapes;
  int target = 0;
  int anchor = -1;       // -1 for attribute-only expressions
  std::string relation;  // empty for attribute-only expressions
};

/// Whether `a` stands in `relation` to `b`. Spatial relations need full
/// separation on that axis; size relations need a gap of 4 pixels.
bool holds(const ShapeMeta& a, const std::string& relation, const ShapeMeta& b);

struct GroundingSample {
  std::size_t id = 0;
  Image image;
  std::vector<std::size_t> token_ids;
  std::string expression;
  BBox box;
  SceneMeta meta;
};

enum class Split { Train, Val, Test, OpenVocab };
Split parse_split(const std::string& name);
std::string to_string(Split split);

struct SynthConfig {
  std::size_t image_size = 64;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 5;
  std::size_t text_len = 12;
  std::uint64_t seed = 7;
  std::size_t train_size = 2000;
  std::size_t val_size = 200;
  std::size_t test_size = 200;
  std::size_t openvocab_size = 200;
  std::vector<std::string> holdout_colors = {"purple"};
  std::vector<std::string> holdout_shapes;

  void validate() const;
  std::size_t split_size(Split split) const;
};

/// One scene from `rng`. Open-vocabulary scenes refer to a target carrying a
/// held-out attribute; other splits never use held-out attributes.
GroundingSample generate_sample(Rng& rng, const SynthConfig& config, bool openvocab,
                                std::size_t id = 0);

/// Sample `index` of `split`, drawn from its own stream.
GroundingSample generate_indexed(const SynthConfig& config, Split split, std::size_t index);
std::vector<GroundingSample> generate_split(const SynthConfig& config, Split split);

/// images/NNNNN.ppm, annotations.jsonl and vocab.txt under `dir`.
void write_split(const std::filesystem::path& dir, const std::vector<GroundingSample>& samples);
std::vector<GroundingSample> read_split(const std::filesystem::path& dir, std::size_t text_len);

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

}  // namespace paml::synth
