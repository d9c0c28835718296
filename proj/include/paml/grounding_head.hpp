#pragma once

#include <span>
#include <string>
#include <vector>

#include "paml/nn.hpp"

namespace paml {

/// Normalized centre/size box; every component lies in [0, 1].
struct BBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
};

struct Corners {
  double x0, y0, x1, y1;
};

/// Corner form clipped to the unit square.
Corners to_corners(const BBox& b);
BBox from_corners(double x0, double y0, double x1, double y1);

double l1(const BBox& a, const BBox& b);
double iou(const BBox& a, const BBox& b);
/// Identical degenerate boxes (zero-area hull) give 1.
double giou(const BBox& a, const BBox& b);
/// Fraction of pairs with IoU strictly above `thresh`.
double accuracy_at_iou(std::span<const BBox> preds, std::span<const BBox> gts,
                       double thresh = 0.5);

/// Three affine maps with relu between them and a sigmoid on the 4 outputs.
class PredictionHead {
 public:
  PredictionHead() = default;
  PredictionHead(ParamStore& store, const std::string& name, std::size_t dim, Rng& rng);

  /// [1 × 4] box from a [1 × C] query.
  Tensor operator()(const Tensor& query) const;

  Linear fc1;
  Linear fc2;
  Linear fc3;
};

BBox to_bbox(const Tensor& box);

struct LossWeights {
  double l1 = 5.0;
  double giou = 2.0;
};

/// Mean absolute difference over the 4 components.
Tensor l1_loss(const Tensor& pred, const BBox& gt);
/// 1 − giou.
Tensor giou_loss(const Tensor& pred, const BBox& gt);
/// Σ over stages of l1·L1 + giou·(1 − GIoU); `expected_stages` must match.
Tensor total_loss(std::span<const Tensor> stage_boxes, const BBox& gt, std::size_t expected_stages,
                  const LossWeights& weights = {});

}  // namespace paml
