#include "paml/config.hpp"

#include <charconv>
#include <cmath>
#include <type_traits>
#include <fstream>
#include <sstream>

namespace paml {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void parse_value(const std::string&, const std::string& v, std::string& out) { out = v; }

void parse_value(const std::string& key, const std::string& v, bool& out) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") out = true;
  else if (v == "0" || v == "false" || v == "off" || v == "no") out = false;
  else throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

template <typename T>
void parse_number(const std::string& key, const std::string& v, T& out) {
  T tmp{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), tmp);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": cannot parse '" + v + "'");
  }
  out = tmp;
}

template <typename T>
  requires(std::is_unsigned_v<T> && !std::is_same_v<T, bool>)
void parse_value(const std::string& key, const std::string& v, T& out) {
  if (!v.empty() && v[0] == '-') throw ConfigError(key + ": must be non-negative");
  parse_number(key, v, out);
}
void parse_value(const std::string& key, const std::string& v, double& out) {
  parse_number(key, v, out);
}

std::string format_value(const std::string& v) { return v; }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}
template <typename T>
std::string format_value(T v) requires std::is_integral_v<T> { return std::to_string(v); }

}  // namespace

template <typename F>
void RunConfig::visit(F&& f) {
  f("data_dir", data_dir);
  f("out_dir", out_dir);
  f("seed", seed);
  f("image_size", image_size);
  f("min_shapes", min_shapes);
  f("max_shapes", max_shapes);
  f("train_size", train_size);
  f("val_size", val_size);
  f("test_size", test_size);
  f("openvocab_size", openvocab_size);
  f("holdout_colors", holdout_colors);
  f("holdout_shapes", holdout_shapes);
  f("patch", patch);
  f("c0", c0);
  f("c", c);
  f("c1", c1);
  f("grid_tokens", grid_tokens);
  f("text_len", text_len);
  f("vocab_size", vocab_size);
  f("encoder_depth", encoder_depth);
  f("encoder_heads", encoder_heads);
  f("encoder_ffn", encoder_ffn);
  f("heads", heads);
  f("depth", depth);
  f("decoder_ffn", decoder_ffn);
  f("bank_size", bank_size);
  f("k", k);
  f("bank_decay", bank_decay);
  f("bank_epsilon", bank_epsilon);
  f("tau_init", tau_init);
  f("interpolation", interpolation);
  f("transform_mode", transform_mode);
  f("use_vdfe", use_vdfe);
  f("use_bank", use_bank);
  f("use_multistage", use_multistage);
  f("epochs", epochs);
  f("decay_epoch", decay_epoch);
  f("batch_size", batch_size);
  f("lr", lr);
  f("beta1", beta1);
  f("beta2", beta2);
  f("adam_eps", adam_eps);
  f("weight_decay", weight_decay);
  f("lambda_l1", lambda_l1);
  f("lambda_giou", lambda_giou);
}

RunConfig RunConfig::full_scale() {
  RunConfig c;
  c.image_size = 256;
  c.patch = 16;
  c.c0 = 768;
  c.c = 256;
  c.c1 = 768;
  c.grid_tokens = 400;
  c.text_len = 20;
  c.encoder_depth = 6;
  c.encoder_heads = 12;
  c.encoder_ffn = 3072;
  c.heads = 8;
  c.depth = 6;
  c.decoder_ffn = 2048;
  c.bank_size = 2048;
  c.epochs = 90;
  c.decay_epoch = 60;
  c.lr = 1e-4;
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  bool found = false;
  visit([&](const char* name, auto& member) {
    if (key == name) {
      parse_value(key, trim(value), member);
      found = true;
    }
  });
  if (!found) throw ConfigError("unknown config key: " + key);
}

bool RunConfig::has_key(const std::string& key) {
  bool found = false;
  RunConfig probe;
  probe.visit([&](const char* name, auto&) { found = found || key == name; });
  return found;
}

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> out;
  RunConfig copy = *this;
  copy.visit([&](const char* name, auto& member) { out[name] = format_value(member); });
  return out;
}

RunConfig RunConfig::from_map(const std::map<std::string, std::string>& values) {
  const auto preset = values.find("preset");
  RunConfig c = (preset != values.end() && preset->second == "full") ? full_scale() : RunConfig{};
  if (preset != values.end() && preset->second != "full" && preset->second != "desk") {
    throw ConfigError("unknown preset: " + preset->second + " (expected full or desk)");
  }
  for (const auto& [k, v] : values) {
    if (k != "preset") c.set(k, v);
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  std::map<std::string, std::string> values;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    values[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  try {
    return from_map(values);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void RunConfig::validate() const {
  encoder();
  vdfe();
  synth().validate();
  AttentionConfig{c, heads}.validate();
  AttentionConfig{c0, encoder_heads}.validate();
  if (c0 % 2 != 0 || c % 2 != 0) throw ConfigError("c0 and c must be even");
  if (k == 0 || k > bank_size) {
    throw ConfigError("k = " + std::to_string(k) + " must be in [1, bank_size = " +
                      std::to_string(bank_size) + "]");
  }
  if (depth == 0) throw ConfigError("depth must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (vocab_size < synth::Vocabulary().size()) {
    throw ConfigError("vocab_size must cover the " + std::to_string(synth::Vocabulary().size()) +
                      " dataset words");
  }
  if (image_size % patch != 0) throw ConfigError("image_size must be divisible by patch");
  const std::size_t side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(grid_tokens))));
  if (side * side != grid_tokens) throw ConfigError("grid_tokens must be a perfect square");
}

EncoderConfig RunConfig::encoder() const {
  EncoderConfig e;
  e.image_size = image_size;
  e.patch = patch;
  e.dim = c0;
  e.heads = encoder_heads;
  e.depth = encoder_depth;
  e.ffn_dim = encoder_ffn;
  e.grid_tokens = grid_tokens;
  e.vocab_size = vocab_size;
  e.text_len = text_len;
  e.interpolation = parse_interpolation_mode(interpolation);
  return e;
}

VdfeConfig RunConfig::vdfe() const {
  VdfeConfig v;
  v.in_dim = c0;
  v.dim = c;
  v.heads = heads;
  v.max_extent = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(grid_tokens))));
  v.mode = parse_transform_mode(transform_mode);
  return v;
}

BankConfig RunConfig::bank() const {
  BankConfig b;
  b.size = bank_size;
  b.dim = c1;
  b.k = k;
  b.decay = bank_decay;
  b.epsilon = bank_epsilon;
  b.tau_init = tau_init;
  return b;
}

DecoderConfig RunConfig::decoder() const {
  return {c, heads, decoder_ffn, effective_depth()};
}

synth::SynthConfig RunConfig::synth() const {
  synth::SynthConfig s;
  s.image_size = image_size;
  s.min_shapes = min_shapes;
  s.max_shapes = max_shapes;
  s.text_len = text_len;
  s.seed = seed;
  s.train_size = train_size;
  s.val_size = val_size;
  s.test_size = test_size;
  s.openvocab_size = openvocab_size;
  s.holdout_colors = split_list(holdout_colors);
  s.holdout_shapes = split_list(holdout_shapes);
  return s;
}

}  // namespace paml
