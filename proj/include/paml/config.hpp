#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "paml/decoder.hpp"
#include "paml/encoder.hpp"
#include "paml/prototype_bank.hpp"
#include "paml/synth.hpp"
#include "paml/vdfe.hpp"

namespace paml {

/// Every knob of a run. Keys in config files and CLI flags use the member names.
struct RunConfig {
  // paths and seeding
  std::string data_dir = "data";
  std::string out_dir = "run";
  std::uint64_t seed = 7;

  // data
  std::size_t image_size = 64;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 5;
  std::size_t train_size = 2000;
  std::size_t val_size = 200;
  std::size_t test_size = 200;
  std::size_t openvocab_size = 200;
  std::string holdout_colors = "purple";  // comma separated
  std::string holdout_shapes;

  // model
  std::size_t patch = 8;
  std::size_t c0 = 64;
  std::size_t c = 32;
  std::size_t c1 = 64;
  std::size_t grid_tokens = 100;
  std::size_t text_len = 12;
  std::size_t vocab_size = 32;
  std::size_t encoder_depth = 2;
  std::size_t encoder_heads = 2;
  std::size_t encoder_ffn = 128;
  std::size_t heads = 2;
  std::size_t depth = 4;
  std::size_t decoder_ffn = 2048;
  std::size_t bank_size = 128;
  std::size_t k = 5;
  double bank_decay = 0.4;
  double bank_epsilon = 1e-5;
  double tau_init = 1.0;
  std::string interpolation = "linear1d";
  std::string transform_mode = "blend-learnable";
  bool use_vdfe = true;
  bool use_bank = true;
  bool use_multistage = true;

  // optimization
  std::size_t epochs = 30;
  std::size_t decay_epoch = 20;
  std::size_t batch_size = 4;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;

  /// Full-size dimensions and the 90-epoch schedule.
  static RunConfig full_scale();

  /// Flat `key = value` lines; `#` and `;` start comments. A `preset = full`
  /// line starts from full_scale() regardless of where it appears.
  static RunConfig load(const std::filesystem::path& path);
  static RunConfig from_map(const std::map<std::string, std::string>& values);

  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> to_map() const;
  static bool has_key(const std::string& key);
  void validate() const;

  EncoderConfig encoder() const;
  VdfeConfig vdfe() const;
  BankConfig bank() const;
  DecoderConfig decoder() const;
  synth::SynthConfig synth() const;
  std::size_t effective_depth() const { return use_multistage ? depth : 1; }

  template <typename F>
  void visit(F&& f);
};

}  // namespace paml
