#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "paml/checkpoint.hpp"
#include "paml/model.hpp"
#include "paml/optim.hpp"

namespace paml {

using Samples = std::vector<synth::GroundingSample>;

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;
  double val_acc = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  double best_val = -1.0;
  std::size_t best_epoch = 0;
  std::uint64_t skipped_steps = 0;
};

struct TrainOptions {
  /// When set, metrics.csv, best.ckpt and last.ckpt are written here.
  std::filesystem::path out_dir;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Owns a model, its optimizer and the shuffling stream for one run.
class Trainer {
 public:
  explicit Trainer(const RunConfig& config);

  /// One pass over `train` in shuffled mini-batches; returns the mean batch loss.
  double run_epoch(const Samples& train, std::size_t epoch);
  /// Full schedule with per-epoch validation and best-checkpoint tracking.
  TrainResult fit(const Samples& train, const Samples& val, const TrainOptions& options = {});

  Model& model() { return model_; }
  AdamW& optimizer() { return optimizer_; }
  TrainingState state() const;

 private:
  RunConfig config_;
  Model model_;
  AdamW optimizer_;
  Rng shuffle_;
  std::size_t epochs_done_ = 0;
  double best_val_ = -1.0;
};

/// accuracy_at_iou(0.5) of the final-stage boxes.
double evaluate(Model& model, const Samples& samples, std::vector<BBox>* predictions = nullptr);

/// Reads `data_dir/<split>`; a missing directory is a usage error naming the path.
Samples load_split(const RunConfig& config, const std::string& split);

/// Train from files under config.data_dir, writing into config.out_dir.
TrainResult train_from_disk(const RunConfig& config, std::ostream& log);

/// Grid syntax: groups separated by '|', axes within a group by ';', values
/// by ','. Each group expands to its cartesian product; groups are appended.
/// Example: "use_vdfe=0,1 | transform_mode=gaussian,laplacian;k=1,5".
std::vector<std::map<std::string, std::string>> expand_grid(const std::string& spec);

struct AblationRow {
  std::map<std::string, std::string> settings;
  double final_loss = 0.0;
  double val_acc = 0.0;
  double openvocab_acc = 0.0;
};

std::vector<AblationRow> ablate(const RunConfig& base, const std::string& grid, const Samples& train,
                                const Samples& val, const Samples& openvocab,
                                std::ostream* progress = nullptr);
/// Markdown table with one column per grid key plus the three metrics.
std::string format_table(const std::vector<AblationRow>& rows);

/// 8-bit binary PGM, min-max normalized; constant maps come out black.
void write_pgm(const std::filesystem::path& path, const std::vector<double>& values,
               std::size_t height, std::size_t width);

/// Writes `{id}_{stage}.pgm` per decoder stage plus `{id}_phi.pgm`,
/// `{id}_gate_raw.pgm` and `{id}_gate_quantized.pgm` when those exist.
/// Returns the written paths.
std::vector<std::filesystem::path> export_attention(Model& model, const Samples& samples,
                                                    const std::filesystem::path& out_dir);

}  // namespace paml
