// Command-line front end: train, eval, gen-data, ablate, export-attn.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "paml/harness.hpp"

namespace {

using namespace paml;

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumeric = 3;

// Leftover `--key value` / `--key=value` pairs become config overrides.
void apply_overrides(RunConfig& config, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string arg = extras[i];
    if (arg.rfind("--", 0) != 0) throw ConfigError("unexpected argument: " + arg);
    arg = arg.substr(2);
    std::string value;
    if (const auto eq = arg.find('='); eq != std::string::npos) {
      value = arg.substr(eq + 1);
      arg.resize(eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("missing value for --" + arg);
      value = extras[++i];
    }
    config.set(arg, value);
  }
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& extras) {
  RunConfig c = path.empty() ? RunConfig{} : RunConfig::load(path);
  apply_overrides(c, extras);
  c.validate();
  return c;
}

std::vector<std::size_t> parse_ids(const std::string& list) {
  std::vector<std::size_t> ids;
  std::stringstream in(list);
  for (std::string item; std::getline(in, item, ',');) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      ids.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("bad sample id '" + item + "' in --ids");
    }
  }
  if (ids.empty()) throw ConfigError("--ids is empty");
  return ids;
}

struct Loaded {
  RunConfig config;
  std::unique_ptr<Model> model;
};

Loaded load_model(const std::string& checkpoint, const std::string& data_dir) {
  const CheckpointData data = read_checkpoint(checkpoint);
  Loaded out{checkpoint_config(data), nullptr};
  if (!data_dir.empty()) out.config.data_dir = data_dir;
  out.model = std::make_unique<Model>(out.config);
  restore(data, *out.model, nullptr);
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Prototype-augmented visual grounding toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, split = "val", data_dir, grid, ids, table_path;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "Train a model; writes metrics.csv and checkpoints");
  train->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  auto* seed_opt = train->add_option("--seed", seed, "Seed override");
  auto* out_opt = train->add_option("--out", out_dir, "Output directory");
  train->allow_extras();

  auto* eval = app.add_subcommand("eval", "Accuracy at IoU 0.5 of a checkpoint on a split");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--split", split, "Split")->check(CLI::IsMember({"train", "val", "test", "openvocab"}));
  eval->add_option("--data", data_dir, "Dataset directory (default: the one used in training)");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  gen->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "Dataset directory")->required();
  gen->allow_extras();

  auto* abl = app.add_subcommand("ablate", "Train and evaluate every configuration of a grid");
  abl->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  abl->add_option("--grid", grid, "Grid, e.g. 'use_vdfe=0,1 | transform_mode=gaussian,laplacian;k=1,5'")
      ->required();
  abl->add_option("--table", table_path, "Also write the table to this file");
  abl->allow_extras();

  auto* exp = app.add_subcommand("export-attn", "Write attention and gate maps as PGM files");
  exp->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  exp->add_option("--ids", ids, "Comma-separated sample ids")->required();
  exp->add_option("--out", out_dir, "Output directory")->required();
  exp->add_option("--split", split, "Split the ids refer to")
      ->check(CLI::IsMember({"train", "val", "test", "openvocab"}));
  exp->add_option("--data", data_dir, "Dataset directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  if (*train) {
    RunConfig c = load_config(config_path, train->remaining());
    if (*seed_opt) c.seed = seed;
    if (*out_opt) c.out_dir = out_dir;
    const TrainResult r = train_from_disk(c, std::cout);
    std::cout << "best val_acc " << r.best_val << " at epoch " << r.best_epoch << "\n";
  } else if (*eval) {
    Loaded l = load_model(checkpoint, data_dir);
    const Samples samples = load_split(l.config, split);
    std::cout << split << " accuracy@0.5 " << evaluate(*l.model, samples) << " over "
              << samples.size() << " samples\n";
  } else if (*gen) {
    const RunConfig c = load_config(config_path, gen->remaining());
    const auto sc = c.synth();
    for (auto s : {synth::Split::Train, synth::Split::Val, synth::Split::Test, synth::Split::OpenVocab}) {
      const auto samples = synth::generate_split(sc, s);
      synth::write_split(std::filesystem::path(out_dir) / synth::to_string(s), samples);
      std::cout << synth::to_string(s) << ": " << samples.size() << " samples\n";
    }
  } else if (*abl) {
    const RunConfig c = load_config(config_path, abl->remaining());
    const Samples tr = load_split(c, "train"), va = load_split(c, "val"),
                  ov = load_split(c, "openvocab");
    const auto rows = ablate(c, grid, tr, va, ov, &std::cerr);
    const std::string table = format_table(rows);
    std::cout << table;
    if (!table_path.empty()) {
      std::ofstream(table_path) << table;
    }
  } else if (*exp) {
    Loaded l = load_model(checkpoint, data_dir);
    const Samples all = load_split(l.config, split);
    Samples chosen;
    for (std::size_t id : parse_ids(ids)) {
      const auto it = std::find_if(all.begin(), all.end(), [id](const auto& s) { return s.id == id; });
      if (it == all.end()) throw ConfigError("no sample with id " + std::to_string(id) + " in " + split);
      chosen.push_back(*it);
    }
    const auto written = export_attention(*l.model, chosen, out_dir);
    std::cout << "wrote " << written.size() << " maps to " << out_dir << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const paml::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const paml::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
}
