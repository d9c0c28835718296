#include "paml/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace paml {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, sep);) out.push_back(trim(item));
  return out;
}

AdamWConfig adam_config(const RunConfig& c) {
  return {c.beta1, c.beta2, c.adam_eps, c.weight_decay};
}

}  // namespace

Trainer::Trainer(const RunConfig& config)
    : config_(config),
      model_(config),
      optimizer_(model_.params(), adam_config(config)),
      shuffle_(Rng::derive(config.seed, 0x5EED)) {}

TrainingState Trainer::state() const { return {epochs_done_, best_val_, shuffle_.serialize()}; }

double Trainer::run_epoch(const Samples& train, std::size_t epoch) {
  if (train.empty()) throw DataError("empty training set");
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1],
              order[static_cast<std::size_t>(shuffle_.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  }
  const double lr = step_lr(config_.lr, epoch, config_.decay_epoch);
  double total = 0.0;
  std::size_t batches = 0;
  std::vector<const synth::GroundingSample*> batch;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    batch.clear();
    for (std::size_t i = start; i < std::min(order.size(), start + config_.batch_size); ++i) {
      batch.push_back(&train[order[i]]);
    }
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      const auto results = model_.forward(batch, true);
      loss = model_.loss(results, batch);
    }
    model_.params().zero_grad();
    tape.backward(loss);
    optimizer_.step(lr);
    model_.bank().clamp_tau();
    total += loss.item();
    ++batches;
  }
  ++epochs_done_;
  return total / static_cast<double>(batches);
}

TrainResult Trainer::fit(const Samples& train, const Samples& val, const TrainOptions& options) {
  TrainResult result;
  std::ofstream metrics;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    metrics.open(options.out_dir / "metrics.csv");
    if (!metrics) throw DataError("cannot write " + (options.out_dir / "metrics.csv").string());
    metrics << "epoch,loss,val_acc\n" << std::setprecision(10);
  }
  for (std::size_t e = 0; e < config_.epochs; ++e) {
    EpochLog entry{e + 1, run_epoch(train, e), val.empty() ? 0.0 : evaluate(model_, val)};
    result.log.push_back(entry);
    if (entry.val_acc > best_val_) {
      best_val_ = entry.val_acc;
      result.best_epoch = entry.epoch;
      if (!options.out_dir.empty()) {
        save_checkpoint(options.out_dir / "best.ckpt", model_, &optimizer_, state());
      }
    }
    if (metrics.is_open()) {
      metrics << entry.epoch << "," << entry.loss << "," << entry.val_acc << "\n";
      metrics.flush();
    }
    if (options.on_epoch) options.on_epoch(entry);
  }
  if (!options.out_dir.empty()) {
    save_checkpoint(options.out_dir / "last.ckpt", model_, &optimizer_, state());
    if (config_.epochs == 0) save_checkpoint(options.out_dir / "best.ckpt", model_, &optimizer_, state());
  }
  result.best_val = best_val_;
  result.skipped_steps = optimizer_.skipped();
  return result;
}

double evaluate(Model& model, const Samples& samples, std::vector<BBox>* predictions) {
  if (samples.empty()) throw DataError("evaluation set is empty");
  std::vector<BBox> preds, gts;
  for (const auto& s : samples) {
    preds.push_back(model.predict(s).final_box());
    gts.push_back(s.box);
  }
  const double acc = accuracy_at_iou(preds, gts, 0.5);
  if (predictions != nullptr) *predictions = std::move(preds);
  return acc;
}

Samples load_split(const RunConfig& config, const std::string& split) {
  const std::filesystem::path dir = std::filesystem::path(config.data_dir) / split;
  if (!std::filesystem::exists(dir / "annotations.jsonl")) {
    throw ConfigError("dataset split not found: " + dir.string() + " (run gen-data first)");
  }
  return synth::read_split(dir, config.text_len);
}

TrainResult train_from_disk(const RunConfig& config, std::ostream& log) {
  const Samples train = load_split(config, "train");
  const Samples val = load_split(config, "val");
  Trainer trainer(config);
  log << "training on " << train.size() << " samples, " << trainer.model().params().scalar_count()
      << " parameters\n";
  TrainOptions options;
  options.out_dir = config.out_dir;
  options.on_epoch = [&log](const EpochLog& e) {
    log << "epoch " << e.epoch << " loss " << e.loss << " val_acc " << e.val_acc << std::endl;
  };
  TrainResult r = trainer.fit(train, val, options);
  if (r.skipped_steps > 0) log << r.skipped_steps << " optimizer steps skipped (non-finite gradients)\n";
  return r;
}

std::vector<std::map<std::string, std::string>> expand_grid(const std::string& spec) {
  std::vector<std::map<std::string, std::string>> rows;
  if (trim(spec).empty()) throw ConfigError("empty ablation grid");
  for (const auto& group : split(spec, '|')) {
    std::vector<std::map<std::string, std::string>> partial{{}};
    std::set<std::string> seen;
    for (const auto& axis : split(group, ';')) {
      const auto eq = axis.find('=');
      if (eq == std::string::npos) throw ConfigError("grid axis needs key=values: '" + axis + "'");
      const std::string key = trim(axis.substr(0, eq));
      if (!RunConfig::has_key(key)) throw ConfigError("unknown grid key: " + key);
      if (!seen.insert(key).second) throw ConfigError("grid key repeated in one group: " + key);
      std::vector<std::string> values;
      for (const auto& v : split(axis.substr(eq + 1), ',')) {
        if (!v.empty()) values.push_back(v);
      }
      if (values.empty()) throw ConfigError("grid axis " + key + " has no values");
      std::vector<std::map<std::string, std::string>> next;
      for (const auto& row : partial) {
        for (const auto& v : values) {
          auto r = row;
          r[key] = v;
          next.push_back(std::move(r));
        }
      }
      partial = std::move(next);
    }
    rows.insert(rows.end(), partial.begin(), partial.end());
  }
  return rows;
}

std::vector<AblationRow> ablate(const RunConfig& base, const std::string& grid, const Samples& train,
                                const Samples& val, const Samples& openvocab,
                                std::ostream* progress) {
  std::vector<AblationRow> rows;
  for (const auto& settings : expand_grid(grid)) {
    RunConfig c = base;
    for (const auto& [k, v] : settings) c.set(k, v);
    c.validate();
    Trainer trainer(c);
    AblationRow row;
    row.settings = settings;
    for (std::size_t e = 0; e < c.epochs; ++e) row.final_loss = trainer.run_epoch(train, e);
    row.val_acc = val.empty() ? 0.0 : evaluate(trainer.model(), val);
    row.openvocab_acc = openvocab.empty() ? 0.0 : evaluate(trainer.model(), openvocab);
    if (progress != nullptr) {
      *progress << "row " << rows.size() + 1 << ": val " << row.val_acc << " openvocab "
                << row.openvocab_acc << std::endl;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_table(const std::vector<AblationRow>& rows) {
  std::vector<std::string> keys;
  for (const auto& r : rows) {
    for (const auto& [k, v] : r.settings) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
  }
  std::ostringstream out;
  out << "|";
  for (const auto& k : keys) out << " " << k << " |";
  out << " final_loss | val_acc | openvocab_acc |\n|";
  for (std::size_t i = 0; i < keys.size() + 3; ++i) out << "---|";
  out << "\n" << std::fixed;
  for (const auto& r : rows) {
    out << "|";
    for (const auto& k : keys) {
      const auto it = r.settings.find(k);
      out << " " << (it == r.settings.end() ? "-" : it->second) << " |";
    }
    out << " " << std::setprecision(4) << r.final_loss << " | " << std::setprecision(3) << r.val_acc
        << " | " << r.openvocab_acc << " |\n";
  }
  return out.str();
}

void write_pgm(const std::filesystem::path& path, const std::vector<double>& values,
               std::size_t height, std::size_t width) {
  if (values.size() != height * width) {
    throw DimensionError("map of " + std::to_string(values.size()) + " values on a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  for (double v : values) {
    const double n = range > 0.0 ? (v - *lo) / range : 0.0;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(n * 255.0))));
  }
}

std::vector<std::filesystem::path> export_attention(Model& model, const Samples& samples,
                                                    const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const std::vector<double>& values, std::size_t h,
                  std::size_t w) {
    if (values.empty()) return;
    const auto p = out_dir / (name + ".pgm");
    write_pgm(p, values, h, w);
    written.push_back(p);
  };
  for (const auto& s : samples) {
    const ForwardResult r = model.predict(s);
    const std::size_t h = r.grid_height, w = r.grid_width;
    const std::string id = std::to_string(s.id);
    for (std::size_t st = 0; st < r.attention.size(); ++st) {
      emit(id + "_" + std::to_string(st + 1), r.attention[st], h, w);
    }
    emit(id + "_phi", r.phi_v, h, w);
    emit(id + "_gate_raw", r.gate_raw, h, w);
    emit(id + "_gate_quantized", r.gate_quantized, h, w);
  }
  return written;
}

}  // namespace paml
