#include "paml/model.hpp"

namespace paml {

namespace {

std::vector<double> column(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

Model::Model(const RunConfig& config) : config_(config) {
  config.validate();
  Rng rng = Rng::derive(config.seed, 0xC0DE);
  visual_ = VisualEncoder(params_, "visual", config.encoder(), rng);
  text_ = TextEncoder(params_, "text", config.encoder(), rng);
  vdfe_ = Vdfe(params_, "vdfe", config.vdfe(), rng);
  bank_ = PrototypeBank(params_, "bank", config.bank());
  gate_ = GateFusion(params_, "fusion", config.c, config.c1, rng);
  decoder_ = Decoder(params_, "decoder", config.decoder(), rng);
  head_ = PredictionHead(params_, "head", config.c, rng);
}

std::vector<ForwardResult> Model::forward(std::span<const synth::GroundingSample* const> batch,
                                          bool train) {
  struct Partial {
    Tensor f_v, f_l, f_disv;
  };
  std::vector<Partial> parts(batch.size());
  std::vector<ForwardResult> out(batch.size());
  std::vector<Tensor> disv(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = *batch[b];
    const TokenGrid grid = visual_(s.image);
    const TextFeatures text = text_(s.token_ids, grid);
    out[b].grid_height = grid.height;
    out[b].grid_width = grid.width;
    if (config_.use_vdfe) {
      const VdfeOutput v = vdfe_(grid, text.tokens);
      parts[b] = {v.f_v, v.f_l, v.f_disv};
      out[b].phi_v = column(v.phi_v);
    } else {
      const Tensor f_v = vdfe_.proj_v(grid.tokens);
      parts[b] = {f_v, vdfe_.proj_l(text.tokens), f_v};
    }
    disv[b] = parts[b].f_disv;
  }

  std::vector<Tensor> f_q(batch.size());
  if (config_.use_bank) {
    const auto stage = prototype_stage(disv, bank_, gate_, train);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      f_q[b] = stage[b].gate.f_q;
      out[b].gate_raw = column(stage[b].gate.i_s);
      out[b].gate_quantized = column(stage[b].gate.e_s);
    }
  } else {
    f_q = disv;
  }

  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (const auto& st : decoder_(parts[b].f_l, f_q[b], parts[b].f_v)) {
      out[b].boxes.push_back(head_(st.query));
      out[b].attention.push_back(st.weights);
    }
  }
  return out;
}

ForwardResult Model::predict(const synth::GroundingSample& sample) {
  NoGradScope no_grad;
  const synth::GroundingSample* one[] = {&sample};
  return std::move(forward(one, false).front());
}

Tensor Model::loss(std::span<const ForwardResult> results,
                   std::span<const synth::GroundingSample* const> batch) const {
  if (results.size() != batch.size() || batch.empty()) {
    throw DimensionError("loss: " + std::to_string(results.size()) + " results for " +
                         std::to_string(batch.size()) + " samples");
  }
  const LossWeights w{config_.lambda_l1, config_.lambda_giou};
  Tensor total;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Tensor l = total_loss(results[b].boxes, batch[b]->box, config_.effective_depth(), w);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

}  // namespace paml
