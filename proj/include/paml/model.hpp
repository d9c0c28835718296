#pragma once

#include <span>
#include <string>
#include <vector>

#include "paml/config.hpp"
#include "paml/decoder.hpp"
#include "paml/encoder.hpp"
#include "paml/grounding_head.hpp"
#include "paml/prototype_bank.hpp"
#include "paml/synth.hpp"
#include "paml/vdfe.hpp"

namespace paml {

/// Per-sample output of one forward pass.
struct ForwardResult {
  std::vector<Tensor> boxes;                   // one [1 × 4] box per stage
  std::vector<std::vector<double>> attention;  // per stage, query attention over the grid
  std::vector<double> phi_v;                   // per-token gate, empty with VDFE off
  std::vector<double> gate_raw;                // I_s, empty with the bank off
  std::vector<double> gate_quantized;          // E_s
  std::size_t grid_height = 0;
  std::size_t grid_width = 0;

  BBox final_box() const { return to_bbox(boxes.back()); }
};

/// Encoder, VDFE, prototype bank, decoder and head wired in that order.
class Model {
 public:
  explicit Model(const RunConfig& config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Forward over a batch. With `train` set the bank takes one EMA step from
  /// the whole batch before inheriting.
  std::vector<ForwardResult> forward(std::span<const synth::GroundingSample* const> batch,
                                     bool train);
  ForwardResult predict(const synth::GroundingSample& sample);

  /// Mean per-sample deep-supervision loss over a batch.
  Tensor loss(std::span<const ForwardResult> results,
              std::span<const synth::GroundingSample* const> batch) const;

  const RunConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  PrototypeBank& bank() { return bank_; }
  const PrototypeBank& bank() const { return bank_; }
  Vdfe& vdfe() { return vdfe_; }
  const VisualEncoder& visual() const { return visual_; }
  const TextEncoder& text() const { return text_; }
  const Decoder& decoder() const { return decoder_; }
  const PredictionHead& head() const { return head_; }

 private:
  RunConfig config_;
  ParamStore params_;
  VisualEncoder visual_;
  TextEncoder text_;
  Vdfe vdfe_;
  PrototypeBank bank_;
  GateFusion gate_;
  Decoder decoder_;
  PredictionHead head_;
};

}  // namespace paml
