#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cstbir/config.hpp"
#include "cstbir/dataset.hpp"
#include "cstbir/fusion.hpp"

namespace cstbir {

inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 100.0;

// Symmetric InfoNCE with diagonal targets. `image_embs` is either [N, d]
// (query-independent) or [N, N, d] where [i, j] is image j pooled under
// query i. Rows are L2-normalized; logits are cosine / tau with
// tau = exp(log_temperature) clamped to [0.01, 100].
torch::Tensor contrastive_loss(const torch::Tensor& query_embs, const torch::Tensor& image_embs,
                               const torch::Tensor& log_temperature);

// Mean softmax cross-entropy; logits [B, C] or [C], labels [B] or scalar.
torch::Tensor classification_loss(const torch::Tensor& logits, const torch::Tensor& labels);

double iou(const BoundingBox& a, const BoundingBox& b);

struct DetectionTarget {
  BoundingBox box;
  std::int64_t label = 0;
};

struct DetectionLossOptions {
  double lambda_coord = 5.0;
  double lambda_noobj = 0.5;
  bool class_cross_entropy = false;
};

// YOLO-v1 multipart loss summed per image and averaged over the batch.
// `targets[b]` lists the objects of image b (possibly none).
torch::Tensor detection_loss(const DetectionGrid& pred,
                             const std::vector<std::vector<DetectionTarget>>& targets,
                             const DetectionLossOptions& options = {});

// alpha * BCE(sigmoid(logits), target) + beta * DICE, DICE per sample with
// smoothing eps, averaged over the batch.
torch::Tensor reconstruction_loss(const torch::Tensor& logits, const torch::Tensor& target,
                                  double alpha = 1.0, double beta = 1.0, double eps = 1.0);

struct LossBundle {
  torch::Tensor l_ct, l_cls_t, l_cls_i, l_od, l_sr;
  torch::Tensor total;

  torch::Tensor component(LossKind kind) const;
};

// Missing components count as exact zeros. Negative weights are rejected.
LossBundle total_loss(const std::map<LossKind, torch::Tensor>& components,
                      const std::map<LossKind, double>& weights = {});

}  // namespace cstbir
