#pragma once

#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cstbir/config.hpp"
#include "cstbir/encoders.hpp"
#include "cstbir/fusion.hpp"
#include "cstbir/objectives.hpp"
#include "cstbir/tokenizer.hpp"

namespace cstbir {

// Text, sketch and image encoders plus the four auxiliary heads.
class STNetImpl : public torch::nn::Module {
 public:
  explicit STNetImpl(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  torch::Tensor text_embedding(const torch::Tensor& ids);          // [B, d]
  torch::Tensor sketch_embedding(const torch::Tensor& sketches);   // [B, d]
  torch::Tensor image_tokens(const torch::Tensor& images);         // [B, 1+m, d]
  torch::Tensor classify(const torch::Tensor& embedding, HeadKind head);
  torch::Tensor temperature() const;

  TextEncoder text{nullptr};
  VisionEncoder sketch{nullptr};
  VisionEncoder image{nullptr};
  torch::nn::Linear text_head{nullptr};
  torch::nn::Linear image_head{nullptr};
  DetectionHead detector{nullptr};
  SketchDecoder decoder{nullptr};
  torch::Tensor log_temperature;

 private:
  ModelConfig config_;
};
TORCH_MODULE(STNet);

struct TrainingBatch {
  torch::Tensor text_ids;  // [N, L]
  torch::Tensor sketches;  // [N, 1, S, S] in [0, 1]
  torch::Tensor images;    // [N, 3, S, S] in [0, 1]
  torch::Tensor labels;    // [N] category indices
  std::vector<BoundingBox> boxes;
};

// Forward pass and every enabled objective on one batch. Disabled losses are
// exact zeros with no graph. Single-modality runs support only CT; the
// sketch-only variant pairs the sketch CLS with sketch-free image pooling.
LossBundle compute_losses(STNet& model, const TrainingBatch& batch, Modality modality,
                          const std::set<LossKind>& enabled);

// Query embedding used for ranking: h_T_cls, or h_S_cls for sketch-only.
torch::Tensor query_embedding(STNet& model, Modality modality, const torch::Tensor& text_ids,
                              const torch::Tensor& sketches);

}  // namespace cstbir
