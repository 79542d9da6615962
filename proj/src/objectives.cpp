#include "cstbir/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "cstbir/error.hpp"

namespace cstbir {

namespace F = torch::nn::functional;

namespace {

torch::Tensor normalize_rows(const torch::Tensor& x, const char* what) {
  auto norms = x.norm(2, -1, true);
  // NaN norms pass through so the training loop can name the diverged loss.
  require(!(norms.min().item<double>() <= 0), ErrorCode::invalid_argument,
          std::string("contrastive_loss: zero-norm row in ") + what);
  return x / norms;
}

}  // namespace

torch::Tensor contrastive_loss(const torch::Tensor& query_embs, const torch::Tensor& image_embs,
                               const torch::Tensor& log_temperature) {
  require(query_embs.dim() == 2 && query_embs.size(0) >= 1, ErrorCode::shape_mismatch,
          "contrastive_loss: query embeddings must be [N, d] with N >= 1");
  const auto n = query_embs.size(0);
  const auto d = query_embs.size(1);
  auto q = normalize_rows(query_embs, "queries");
  torch::Tensor similarity;
  if (image_embs.dim() == 2) {
    require(image_embs.size(0) == n && image_embs.size(1) == d, ErrorCode::shape_mismatch,
            "contrastive_loss: image embeddings must be [N, d]");
    similarity = q.mm(normalize_rows(image_embs, "images").t());
  } else {
    require(image_embs.dim() == 3 && image_embs.size(0) == n && image_embs.size(1) == n &&
                image_embs.size(2) == d,
            ErrorCode::shape_mismatch, "contrastive_loss: image embeddings must be [N, N, d]");
    similarity = (q.unsqueeze(1) * normalize_rows(image_embs, "images")).sum(2);
  }
  auto log_tau = log_temperature.clamp(std::log(kMinTemperature), std::log(kMaxTemperature));
  auto logits = similarity / log_tau.exp();
  auto targets = torch::arange(n, torch::kInt64);
  return 0.5 * (F::cross_entropy(logits, targets) + F::cross_entropy(logits.t(), targets));
}

torch::Tensor classification_loss(const torch::Tensor& logits, const torch::Tensor& labels) {
  auto l = logits.dim() == 1 ? logits.unsqueeze(0) : logits;
  auto y = labels.dim() == 0 ? labels.unsqueeze(0) : labels;
  require(l.dim() == 2 && y.dim() == 1 && l.size(0) == y.size(0), ErrorCode::shape_mismatch,
          "classification_loss: logits [B, C] and labels [B] required");
  require(y.min().item<std::int64_t>() >= 0 && y.max().item<std::int64_t>() < l.size(1),
          ErrorCode::out_of_range, "classification_loss: label outside [0, C)");
  return F::cross_entropy(l, y.to(torch::kInt64));
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double ih = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace {

// IoU of a predicted center-size box (tensors) against a fixed box.
torch::Tensor box_iou(const torch::Tensor& cx, const torch::Tensor& cy, const torch::Tensor& w,
                      const torch::Tensor& h, const BoundingBox& gt) {
  auto x1 = cx - w / 2, x2 = cx + w / 2, y1 = cy - h / 2, y2 = cy + h / 2;
  auto iw = (torch::clamp_max(x2, gt.x + gt.w) - torch::clamp_min(x1, gt.x)).clamp_min(0.0);
  auto ih = (torch::clamp_max(y2, gt.y + gt.h) - torch::clamp_min(y1, gt.y)).clamp_min(0.0);
  auto inter = iw * ih;
  return inter / (w * h + gt.area() - inter);
}

}  // namespace

torch::Tensor detection_loss(const DetectionGrid& pred,
                             const std::vector<std::vector<DetectionTarget>>& targets,
                             const DetectionLossOptions& options) {
  const auto& values = pred.values;
  const int s = pred.grid, nb = pred.boxes, nc = pred.classes;
  require(values.dim() == 4 && values.size(1) == s && values.size(2) == s &&
              values.size(3) == pred.channels(),
          ErrorCode::shape_mismatch, "detection_loss: prediction shape disagrees with S, B, C");
  require(static_cast<std::size_t>(values.size(0)) == targets.size(), ErrorCode::shape_mismatch,
          "detection_loss: one target list per image required");

  auto total = torch::zeros({}, values.options());
  for (std::size_t b = 0; b < targets.size(); ++b) {
    auto cells = values[static_cast<std::int64_t>(b)];
    auto noobj = torch::ones({s, s, nb}, values.options().requires_grad(false));
    for (const auto& t : targets[b]) {
      require(t.box.valid(), ErrorCode::invalid_argument, "detection_loss: invalid target box");
      const double cx = t.box.x + t.box.w / 2, cy = t.box.y + t.box.h / 2;
      require(cx >= 0 && cx < 1 && cy >= 0 && cy < 1, ErrorCode::invalid_argument,
              "detection_loss: target center outside [0, 1)");
      require(t.label >= 0 && t.label < nc, ErrorCode::out_of_range, "detection_loss: label outside [0, C)");
      const int col = static_cast<int>(std::floor(cx * s));
      const int row = static_cast<int>(std::floor(cy * s));
      const double tx = cx * s - col, ty = cy * s - row;
      auto cell = cells[row][col];

      // Responsible predictor: highest IoU with the target, ties to the lowest index.
      std::vector<torch::Tensor> ious;
      int best = 0;
      double best_iou = -1;
      for (int k = 0; k < nb; ++k) {
        auto box = cell.slice(0, 5 * k, 5 * k + 5);
        auto overlap = box_iou((box[0] + col) / s, (box[1] + row) / s, box[2], box[3], t.box);
        const double v = overlap.item<double>();
        if (v > best_iou) {
          best_iou = v;
          best = k;
        }
        ious.push_back(overlap);
      }
      auto box = cell.slice(0, 5 * best, 5 * best + 5);
      auto coord = (box[0] - tx).pow(2) + (box[1] - ty).pow(2) +
                   (box[2].sqrt() - std::sqrt(t.box.w)).pow(2) + (box[3].sqrt() - std::sqrt(t.box.h)).pow(2);
      total = total + options.lambda_coord * coord + (box[4] - ious[static_cast<std::size_t>(best)]).pow(2);
      noobj[row][col][best] = 0.0;

      auto class_scores = cell.slice(0, 5 * nb);
      if (options.class_cross_entropy) {
        total = total - torch::log_softmax(class_scores, 0)[t.label];
      } else {
        auto onehot = torch::zeros({nc}, values.options().requires_grad(false));
        onehot[t.label] = 1.0;
        total = total + (class_scores - onehot).pow(2).sum();
      }
    }
    auto confidence = cells.slice(2, 0, 5 * nb).reshape({s, s, nb, 5}).select(3, 4);
    total = total + options.lambda_noobj * (noobj * confidence.pow(2)).sum();
  }
  return targets.empty() ? total : total / static_cast<double>(targets.size());
}

torch::Tensor reconstruction_loss(const torch::Tensor& logits, const torch::Tensor& target,
                                  double alpha, double beta, double eps) {
  require(logits.sizes() == target.sizes(), ErrorCode::shape_mismatch,
          "reconstruction_loss: prediction and target shapes differ");
  require(logits.dim() >= 2, ErrorCode::shape_mismatch, "reconstruction_loss: expected [B, ...]");
  require(target.min().item<double>() >= 0 && target.max().item<double>() <= 1,
          ErrorCode::invalid_argument, "reconstruction_loss: target outside [0, 1]");
  auto bce = F::binary_cross_entropy_with_logits(logits, target);
  auto p = torch::sigmoid(logits).flatten(1);
  auto q = target.flatten(1);
  auto dice = 1.0 - (2.0 * (p * q).sum(1) + eps) / (p.sum(1) + q.sum(1) + eps);
  return alpha * bce + beta * dice.mean();
}

torch::Tensor LossBundle::component(LossKind kind) const {
  switch (kind) {
    case LossKind::ct: return l_ct;
    case LossKind::cls_t: return l_cls_t;
    case LossKind::cls_i: return l_cls_i;
    case LossKind::od: return l_od;
    case LossKind::sr: return l_sr;
  }
  return l_ct;
}

LossBundle total_loss(const std::map<LossKind, torch::Tensor>& components,
                      const std::map<LossKind, double>& weights) {
  torch::TensorOptions options = torch::kFloat32;
  for (const auto& [_, c] : components) {
    options = c.options();
    break;
  }
  for (const auto& [kind, w] : weights) {
    require(w >= 0 && std::isfinite(w), ErrorCode::invalid_argument,
            "total_loss: negative weight for " + to_string(kind));
  }
  auto get = [&](LossKind kind) {
    auto it = components.find(kind);
    return it == components.end() ? torch::zeros({}, options.requires_grad(false)) : it->second;
  };
  LossBundle bundle{get(LossKind::ct), get(LossKind::cls_t), get(LossKind::cls_i), get(LossKind::od),
                    get(LossKind::sr), torch::zeros({}, options.requires_grad(false))};
  for (auto kind : all_losses()) {
    auto it = weights.find(kind);
    const double w = it == weights.end() ? 1.0 : it->second;
    if (components.contains(kind) && w != 0.0) bundle.total = bundle.total + w * bundle.component(kind);
  }
  return bundle;
}

}  // namespace cstbir
