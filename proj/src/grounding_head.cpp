#include "paml/grounding_head.hpp"

#include <algorithm>
#include <cmath>

namespace paml {

namespace {

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

struct TensorCorners {
  Tensor x0, y0, x1, y1;
};

TensorCorners corners_of(const Tensor& pred) {
  if (pred.numel() != 4) throw DimensionError("box tensor needs 4 values, got " + shape_str(pred.shape()));
  const Tensor flat = reshape(pred, {1, 4});
  const Tensor cx = slice(flat, 1, 0, 1), cy = slice(flat, 1, 1, 1);
  const Tensor hw = scale(slice(flat, 1, 2, 1), 0.5), hh = scale(slice(flat, 1, 3, 1), 0.5);
  return {clamp(sub(cx, hw), 0.0, 1.0), clamp(sub(cy, hh), 0.0, 1.0),
          clamp(add(cx, hw), 0.0, 1.0), clamp(add(cy, hh), 0.0, 1.0)};
}

TensorCorners corners_of(const BBox& b) {
  const Corners c = to_corners(b);
  return {Tensor::full({1, 1}, c.x0), Tensor::full({1, 1}, c.y0), Tensor::full({1, 1}, c.x1),
          Tensor::full({1, 1}, c.y1)};
}

Tensor area(const TensorCorners& c) {
  return hadamard(clamp_min(sub(c.x1, c.x0), 0.0), clamp_min(sub(c.y1, c.y0), 0.0));
}

}  // namespace

Corners to_corners(const BBox& b) {
  return {clip01(b.cx - b.w / 2), clip01(b.cy - b.h / 2), clip01(b.cx + b.w / 2),
          clip01(b.cy + b.h / 2)};
}

BBox from_corners(double x0, double y0, double x1, double y1) {
  return {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
}

double l1(const BBox& a, const BBox& b) {
  return (std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) +
          std::abs(a.h - b.h)) / 4.0;
}

namespace {

struct Areas {
  double inter, uni, hull;
};

Areas areas(const BBox& a, const BBox& b) {
  const Corners p = to_corners(a), q = to_corners(b);
  auto box_area = [](const Corners& c) {
    return std::max(0.0, c.x1 - c.x0) * std::max(0.0, c.y1 - c.y0);
  };
  const double iw = std::max(0.0, std::min(p.x1, q.x1) - std::max(p.x0, q.x0));
  const double ih = std::max(0.0, std::min(p.y1, q.y1) - std::max(p.y0, q.y0));
  const double inter = iw * ih;
  const double hull = (std::max(p.x1, q.x1) - std::min(p.x0, q.x0)) *
                      (std::max(p.y1, q.y1) - std::min(p.y0, q.y0));
  return {inter, box_area(p) + box_area(q) - inter, hull};
}

}  // namespace

double iou(const BBox& a, const BBox& b) {
  const Areas s = areas(a, b);
  return s.uni > 0.0 ? s.inter / s.uni : 0.0;
}

double giou(const BBox& a, const BBox& b) {
  const Areas s = areas(a, b);
  if (s.hull <= 0.0) return 1.0;
  const double i = s.uni > 0.0 ? s.inter / s.uni : 0.0;
  return i - (s.hull - s.uni) / s.hull;
}

double accuracy_at_iou(std::span<const BBox> preds, std::span<const BBox> gts, double thresh) {
  if (preds.empty()) throw DataError("accuracy_at_iou: empty evaluation set");
  if (preds.size() != gts.size()) {
    throw DimensionError("accuracy_at_iou: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(gts.size()) + " targets");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += iou(preds[i], gts[i]) > thresh ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

PredictionHead::PredictionHead(ParamStore& store, const std::string& name, std::size_t dim,
                               Rng& rng)
    : fc1(store, name + ".fc1", dim, dim, rng),
      fc2(store, name + ".fc2", dim, dim, rng),
      fc3(store, name + ".fc3", dim, 4, rng) {}

Tensor PredictionHead::operator()(const Tensor& query) const {
  return sigmoid(fc3(relu(fc2(relu(fc1(query))))));
}

BBox to_bbox(const Tensor& box) {
  if (box.numel() != 4) throw DimensionError("box tensor needs 4 values, got " + shape_str(box.shape()));
  const auto v = box.data();
  return {v[0], v[1], v[2], v[3]};
}

Tensor l1_loss(const Tensor& pred, const BBox& gt) {
  const Tensor target = Tensor::constant({1, 4}, {gt.cx, gt.cy, gt.w, gt.h});
  return mean(abs(sub(reshape(pred, {1, 4}), target)));
}

Tensor giou_loss(const Tensor& pred, const BBox& gt) {
  const TensorCorners p = corners_of(pred), q = corners_of(gt);
  const Tensor iw = clamp_min(sub(minimum(p.x1, q.x1), maximum(p.x0, q.x0)), 0.0);
  const Tensor ih = clamp_min(sub(minimum(p.y1, q.y1), maximum(p.y0, q.y0)), 0.0);
  const Tensor inter = hadamard(iw, ih);
  const Tensor uni = sub(add(area(p), area(q)), inter);
  const Tensor hull = hadamard(sub(maximum(p.x1, q.x1), minimum(p.x0, q.x0)),
                               sub(maximum(p.y1, q.y1), minimum(p.y0, q.y0)));
  if (hull.item() <= 0.0) return Tensor::scalar(0.0);
  constexpr double kFloor = 1e-12;
  const Tensor i = div(inter, clamp_min(uni, kFloor));
  const Tensor g = sub(i, div(sub(hull, uni), hull));
  return reshape(add_scalar(neg(g), 1.0), {1});
}

Tensor total_loss(std::span<const Tensor> stage_boxes, const BBox& gt, std::size_t expected_stages,
                  const LossWeights& weights) {
  if (stage_boxes.size() != expected_stages) {
    throw ConfigError("loss got " + std::to_string(stage_boxes.size()) +
                      " stage predictions, decoder depth is " + std::to_string(expected_stages));
  }
  if (stage_boxes.empty()) throw ConfigError("loss needs at least one stage");
  Tensor total;
  for (const Tensor& box : stage_boxes) {
    const Tensor term =
        add(scale(l1_loss(box, gt), weights.l1), scale(giou_loss(box, gt), weights.giou));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

}  // namespace paml
