#include "paml/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace paml::synth {

namespace {

using nlohmann::json;

constexpr int kSizes[] = {10, 14, 18, 22};
constexpr int kGap = 2;
constexpr double kNoise = 0.04;
constexpr std::size_t kLayoutAttempts = 100;
constexpr std::size_t kMaxAttempts = 1000;

struct Rgb {
  double r, g, b;
};

Rgb color_of(const std::string& name) {
  if (name == "red") return {0.9, 0.1, 0.1};
  if (name == "green") return {0.1, 0.8, 0.2};
  if (name == "blue") return {0.15, 0.3, 0.95};
  if (name == "yellow") return {0.95, 0.9, 0.1};
  if (name == "purple") return {0.6, 0.15, 0.8};
  if (name == "orange") return {1.0, 0.55, 0.05};
  throw ConfigError("unknown color: " + name);
}

bool inside(const std::string& shape, int s, int dx, int dy) {
  const double half = s / 2.0;
  const double px = dx + 0.5, py = dy + 0.5;
  if (shape == "square") return true;
  if (shape == "circle") return (px - half) * (px - half) + (py - half) * (py - half) <= half * half;
  if (shape == "triangle") return std::abs(px - half) <= half * (py / s);
  if (shape == "cross") return std::abs(px - half) < s / 6.0 || std::abs(py - half) < s / 6.0;
  throw ConfigError("unknown shape: " + shape);
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(v.size()) - 1))];
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

std::vector<std::string> without(const std::vector<std::string>& all,
                                 const std::vector<std::string>& drop) {
  std::vector<std::string> out;
  for (const auto& a : all) {
    if (!contains(drop, a)) out.push_back(a);
  }
  return out;
}

bool same_kind(const ShapeMeta& a, const ShapeMeta& b) {
  return a.color == b.color && a.shape == b.shape;
}

std::size_t count_kind(const std::vector<ShapeMeta>& shapes, const ShapeMeta& s) {
  return static_cast<std::size_t>(
      std::count_if(shapes.begin(), shapes.end(), [&](const ShapeMeta& o) { return same_kind(o, s); }));
}

// Squares of side `size` at random positions with a gap; false when some shape
// does not fit after a bounded number of tries.
bool place(Rng& rng, std::size_t image_size, std::vector<ShapeMeta>& shapes) {
  const int n = static_cast<int>(image_size);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    auto& s = shapes[i];
    s.size = kSizes[rng.uniform_int(0, 3)];
    bool ok = false;
    for (int t = 0; t < 50 && !ok; ++t) {
      s.x0 = static_cast<int>(rng.uniform_int(0, n - s.size));
      s.y0 = static_cast<int>(rng.uniform_int(0, n - s.size));
      ok = true;
      for (std::size_t j = 0; j < i && ok; ++j) {
        const auto& o = shapes[j];
        const bool apart = s.x0 + s.size + kGap <= o.x0 || o.x0 + o.size + kGap <= s.x0 ||
                           s.y0 + s.size + kGap <= o.y0 || o.y0 + o.size + kGap <= s.y0;
        ok = apart;
      }
    }
    if (!ok) return false;
  }
  return true;
}

// Paints every shape and tightens its bounds to the painted pixels.
Image render(Rng& rng, std::size_t image_size, std::vector<ShapeMeta>& shapes) {
  const std::size_t n = image_size;
  Image img{3, n, n, std::vector<double>(3 * n * n)};
  for (double& v : img.pixels) v = 0.12 + rng.uniform(-kNoise, kNoise);
  for (auto& s : shapes) {
    const Rgb c = color_of(s.color);
    const int ox = s.x0, oy = s.y0;
    int x0 = ox + s.size, y0 = oy + s.size, x1 = ox, y1 = oy;
    for (int dy = 0; dy < s.size; ++dy) {
      for (int dx = 0; dx < s.size; ++dx) {
        if (!inside(s.shape, s.size, dx, dy)) continue;
        const std::size_t x = static_cast<std::size_t>(ox + dx), y = static_cast<std::size_t>(oy + dy);
        const double rgb[3] = {c.r, c.g, c.b};
        for (std::size_t ch = 0; ch < 3; ++ch) {
          img.pixels[(ch * n + y) * n + x] = rgb[ch] + rng.uniform(-kNoise, kNoise);
        }
        x0 = std::min(x0, ox + dx);
        y0 = std::min(y0, oy + dy);
        x1 = std::max(x1, ox + dx + 1);
        y1 = std::max(y1, oy + dy + 1);
      }
    }
    s.x0 = x0;
    s.y0 = y0;
    s.x1 = x1;
    s.y1 = y1;
  }
  for (double& v : img.pixels) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return img;
}

std::string describe(const ShapeMeta& s) { return "the " + s.color + " " + s.shape; }

json meta_to_json(const SceneMeta& m) {
  json shapes = json::array();
  for (const auto& s : m.shapes) {
    shapes.push_back({{"color", s.color},
                      {"shape", s.shape},
                      {"size", s.size},
                      {"bounds", {s.x0, s.y0, s.x1, s.y1}}});
  }
  return {{"shapes", shapes}, {"target", m.target}, {"anchor", m.anchor}, {"relation", m.relation}};
}

SceneMeta meta_from_json(const json& j) {
  SceneMeta m;
  for (const auto& s : j.at("shapes")) {
    const auto b = s.at("bounds");
    m.shapes.push_back({s.at("color").get<std::string>(), s.at("shape").get<std::string>(),
                        s.at("size").get<int>(), b.at(0).get<int>(), b.at(1).get<int>(),
                        b.at(2).get<int>(), b.at(3).get<int>()});
  }
  m.target = j.at("target").get<int>();
  m.anchor = j.at("anchor").get<int>();
  m.relation = j.at("relation").get<std::string>();
  return m;
}

}  // namespace

Vocabulary::Vocabulary() {
  words_ = {"[PAD]", "[SEP]", "the"};
  words_.insert(words_.end(), kColors.begin(), kColors.end());
  words_.insert(words_.end(), kShapes.begin(), kShapes.end());
  for (const char* w : {"left", "right", "of", "above", "below", "bigger", "smaller", "than"}) {
    words_.emplace_back(w);
  }
}

std::size_t Vocabulary::id(const std::string& word) const {
  const auto it = std::find(words_.begin(), words_.end(), word);
  if (it == words_.end()) throw DataError("word not in vocabulary: " + word);
  return static_cast<std::size_t>(it - words_.begin());
}

const std::string& Vocabulary::word(std::size_t id) const {
  if (id >= words_.size()) throw DataError("token id out of range: " + std::to_string(id));
  return words_[id];
}

std::vector<std::size_t> Vocabulary::encode(const std::string& expression, std::size_t length) const {
  std::vector<std::size_t> ids;
  std::istringstream in(expression);
  for (std::string w; in >> w;) ids.push_back(id(w));
  ids.push_back(kSep);
  if (ids.size() > length) {
    throw DataError("expression needs " + std::to_string(ids.size()) + " tokens, limit " +
                    std::to_string(length) + ": " + expression);
  }
  ids.resize(length, kPad);
  return ids;
}

bool holds(const ShapeMeta& a, const std::string& relation, const ShapeMeta& b) {
  if (relation == "left of") return a.x1 <= b.x0;
  if (relation == "right of") return a.x0 >= b.x1;
  if (relation == "above") return a.y1 <= b.y0;
  if (relation == "below") return a.y0 >= b.y1;
  if (relation == "bigger than") return a.size >= b.size + 4;
  if (relation == "smaller than") return a.size + 4 <= b.size;
  throw ConfigError("unknown relation: " + relation);
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  if (name == "openvocab") return Split::OpenVocab;
  throw ConfigError("unknown split: " + name + " (expected train, val, test, openvocab)");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::OpenVocab: return "openvocab";
  }
  return "unknown";
}

void SynthConfig::validate() const {
  if (image_size < 2 * static_cast<std::size_t>(kSizes[3])) {
    throw ConfigError("image_size must be at least " + std::to_string(2 * kSizes[3]));
  }
  if (min_shapes == 0 || min_shapes > max_shapes || max_shapes > 8) {
    throw ConfigError("shape count range must satisfy 1 <= min <= max <= 8");
  }
  for (const auto& c : holdout_colors) {
    if (!contains(kColors, c)) throw ConfigError("unknown holdout color: " + c);
  }
  for (const auto& s : holdout_shapes) {
    if (!contains(kShapes, s)) throw ConfigError("unknown holdout shape: " + s);
  }
  if (without(kColors, holdout_colors).empty() || without(kShapes, holdout_shapes).empty()) {
    throw ConfigError("holdout leaves no colors or shapes for training");
  }
}

std::size_t SynthConfig::split_size(Split split) const {
  switch (split) {
    case Split::Train: return train_size;
    case Split::Val: return val_size;
    case Split::Test: return test_size;
    case Split::OpenVocab: return openvocab_size;
  }
  return 0;
}

GroundingSample generate_sample(Rng& rng, const SynthConfig& config, bool openvocab,
                                std::size_t id) {
  config.validate();
  if (openvocab && config.holdout_colors.empty() && config.holdout_shapes.empty()) {
    throw ConfigError("open-vocabulary split needs at least one held-out attribute");
  }
  const auto colors = without(kColors, config.holdout_colors);
  const auto shapes = without(kShapes, config.holdout_shapes);
  static const Vocabulary vocab;

  std::vector<ShapeMeta> scene;
  for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
    if (attempt % kLayoutAttempts == 0) {
      const auto n = static_cast<std::size_t>(rng.uniform_int(
          static_cast<std::int64_t>(config.min_shapes), static_cast<std::int64_t>(config.max_shapes)));
      scene.assign(n, {});
      for (auto& s : scene) {
        s.color = pick(rng, colors);
        s.shape = pick(rng, shapes);
      }
      if (openvocab) {
        // The target (index 0) carries a held-out attribute.
        auto& t = scene[0];
        if (!config.holdout_colors.empty()) t.color = pick(rng, config.holdout_colors);
        if (!config.holdout_shapes.empty() &&
            (config.holdout_colors.empty() || rng.uniform() < 0.5)) {
          t.shape = pick(rng, config.holdout_shapes);
        }
      }
      // Half the multi-shape scenes get a twin of the target so that a
      // relation is needed to tell them apart.
      if (n >= 3 && rng.uniform() < 0.5) {
        scene[1].color = scene[0].color;
        scene[1].shape = scene[0].shape;
      }
    }
    if (!place(rng, config.image_size, scene)) continue;

    // Bounds for relations come from the painted pixels, so render first.
    Rng paint = Rng::derive(rng.next_u64(), 0);
    std::vector<ShapeMeta> drawn = scene;
    Image image = render(paint, config.image_size, drawn);

    const ShapeMeta& t = drawn[0];
    const bool attribute_only = count_kind(drawn, t) == 1;
    std::vector<std::pair<int, std::string>> relational;
    for (std::size_t a = 1; a < drawn.size(); ++a) {
      if (count_kind(drawn, drawn[a]) != 1) continue;
      for (const auto& r : kRelations) {
        if (!holds(t, r, drawn[a])) continue;
        bool unique = true;
        for (std::size_t o = 1; o < drawn.size() && unique; ++o) {
          if (o != a && same_kind(drawn[o], t) && holds(drawn[o], r, drawn[a])) unique = false;
        }
        if (unique) relational.emplace_back(static_cast<int>(a), r);
      }
    }
    if (!attribute_only && relational.empty()) continue;

    SceneMeta meta;
    meta.target = 0;
    std::string expression = describe(t);
    if (relational.empty() || (attribute_only && rng.uniform() < 0.5)) {
      // attribute-only
    } else {
      const auto& [a, r] = pick(rng, relational);
      meta.anchor = a;
      meta.relation = r;
      expression += " " + r + " " + describe(drawn[static_cast<std::size_t>(a)]);
    }

    // Shuffle so the target is not always painted first or listed first.
    std::vector<std::size_t> order(drawn.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    int anchor = -1;
    for (std::size_t i = 0; i < order.size(); ++i) {
      meta.shapes.push_back(drawn[order[i]]);
      if (order[i] == 0) meta.target = static_cast<int>(i);
      if (meta.anchor >= 0 && order[i] == static_cast<std::size_t>(meta.anchor)) {
        anchor = static_cast<int>(i);
      }
    }
    meta.anchor = anchor;

    const double n = static_cast<double>(config.image_size);
    GroundingSample sample;
    sample.id = id;
    sample.image = std::move(image);
    sample.expression = expression;
    sample.token_ids = vocab.encode(expression, config.text_len);
    sample.box = from_corners(t.x0 / n, t.y0 / n, t.x1 / n, t.y1 / n);
    sample.meta = std::move(meta);
    return sample;
  }
  throw DataError("could not generate an unambiguous scene after " + std::to_string(kMaxAttempts) +
                  " attempts");
}

GroundingSample generate_indexed(const SynthConfig& config, Split split, std::size_t index) {
  Rng rng = Rng::derive(config.seed, static_cast<std::uint64_t>(split) + 1, index);
  return generate_sample(rng, config, split == Split::OpenVocab, index);
}

std::vector<GroundingSample> generate_split(const SynthConfig& config, Split split) {
  std::vector<GroundingSample> out;
  const std::size_t n = config.split_size(split);
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_indexed(config, split, i));
  return out;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3) throw DataError("PPM needs 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  std::string row(image.width * 3, '\0');
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
        row[x * 3 + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) {
    throw DataError("not an 8-bit binary PPM: " + path.string());
  }
  in.get();
  std::string bytes(w * h * 3, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw DataError("truncated PPM: " + path.string());
  }
  Image img{3, h, w, std::vector<double>(3 * w * h)};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        img.pixels[(c * h + y) * w + x] =
            static_cast<unsigned char>(bytes[(y * w + x) * 3 + c]) / 255.0;
      }
    }
  }
  return img;
}

void write_split(const std::filesystem::path& dir, const std::vector<GroundingSample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream ann(dir / "annotations.jsonl");
  if (!ann) throw DataError("cannot write " + (dir / "annotations.jsonl").string());
  char name[32];
  for (const auto& s : samples) {
    std::snprintf(name, sizeof(name), "%05zu.ppm", s.id);
    write_ppm(dir / "images" / name, s.image);
    const json j = {{"id", s.id},
                    {"tokens", s.token_ids},
                    {"expression", s.expression},
                    {"box", {s.box.cx, s.box.cy, s.box.w, s.box.h}},
                    {"meta", meta_to_json(s.meta)}};
    ann << j.dump() << "\n";
  }
  std::ofstream voc(dir / "vocab.txt");
  for (const auto& w : Vocabulary().words()) voc << w << "\n";
}

std::vector<GroundingSample> read_split(const std::filesystem::path& dir, std::size_t text_len) {
  const auto ann_path = dir / "annotations.jsonl";
  std::ifstream ann(ann_path);
  if (!ann) throw DataError("missing dataset split: " + ann_path.string());
  std::vector<GroundingSample> out;
  char name[32];
  std::size_t line_no = 0;
  for (std::string line; std::getline(ann, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      GroundingSample s;
      s.id = j.at("id").get<std::size_t>();
      s.token_ids = j.at("tokens").get<std::vector<std::size_t>>();
      s.expression = j.at("expression").get<std::string>();
      const auto b = j.at("box").get<std::vector<double>>();
      if (b.size() != 4) throw DataError("box needs 4 values");
      s.box = {b[0], b[1], b[2], b[3]};
      s.meta = meta_from_json(j.at("meta"));
      if (s.token_ids.size() != text_len) {
        throw DataError("expected " + std::to_string(text_len) + " tokens, got " +
                        std::to_string(s.token_ids.size()));
      }
      std::snprintf(name, sizeof(name), "%05zu.ppm", s.id);
      s.image = read_ppm(dir / "images" / name);
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw DataError(ann_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(ann_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (out.empty()) throw DataError("empty dataset split: " + dir.string());
  return out;
}

}  // namespace paml::synth
