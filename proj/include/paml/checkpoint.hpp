#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "paml/model.hpp"
#include "paml/optim.hpp"

namespace paml {

/// File layout, all integers and doubles little-endian:
///   "PAMLCKPT" | u32 version | u64 n + n bytes of JSON metadata
///   | u64 count | count × (u32 name length, name, u32 rank, rank × u64 extent, u64 offset)
///   | u64 total | total × f64
/// Offsets count doubles from the start of the value block.
struct CheckpointData {
  static constexpr std::uint32_t kVersion = 1;

  struct Record {
    Shape shape;
    std::vector<double> values;
  };

  std::string metadata = "{}";  // JSON object
  std::map<std::string, Record> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

struct TrainingState {
  std::size_t epoch = 0;
  double best_val = -1.0;
  std::string rng_state;
};

/// Parameters, bank state, optimizer moments (when given), config and `state`.
CheckpointData capture(const Model& model, const AdamW* optimizer, const TrainingState& state);
RunConfig checkpoint_config(const CheckpointData& data);
TrainingState checkpoint_state(const CheckpointData& data);
/// Copies tensors into a model built from checkpoint_config(data).
void restore(const CheckpointData& data, Model& model, AdamW* optimizer);

void save_checkpoint(const std::filesystem::path& path, const Model& model, const AdamW* optimizer,
                     const TrainingState& state);

}  // namespace paml
