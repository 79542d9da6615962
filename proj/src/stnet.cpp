#include "cstbir/stnet.hpp"

#include <cmath>

#include "cstbir/error.hpp"

namespace cstbir {

STNetImpl::STNetImpl(const ModelConfig& config) : config_(config) {
  config.validate();
  const int d = config.embed_dim;
  text = register_module("text", TextEncoder(config));
  sketch = register_module("sketch", VisionEncoder(config, 1));
  image = register_module("image", VisionEncoder(config, 3));
  text_head = register_module("text_head", torch::nn::Linear(d, config.n_categories));
  image_head = register_module("image_head", torch::nn::Linear(d, config.n_categories));
  detector = register_module(
      "detector", DetectionHead(d, config.grid_side(), config.od_grid, config.od_boxes, config.n_categories));
  decoder = register_module(
      "decoder", SketchDecoder(d, config.grid_side(), config.image_size, config.decoder_min_channels));
  log_temperature = register_parameter("log_temperature", torch::full({}, std::log(config.temperature_init)));
}

torch::Tensor STNetImpl::text_embedding(const torch::Tensor& ids) { return text->forward(ids).select(1, 0); }

torch::Tensor STNetImpl::sketch_embedding(const torch::Tensor& sketches) {
  return sketch->forward(sketches).select(1, 0);
}

torch::Tensor STNetImpl::image_tokens(const torch::Tensor& images) { return image->forward(images); }

torch::Tensor STNetImpl::classify(const torch::Tensor& embedding, HeadKind head) {
  return head == HeadKind::text ? text_head->forward(embedding) : image_head->forward(embedding);
}

torch::Tensor STNetImpl::temperature() const {
  return log_temperature.clamp(std::log(kMinTemperature), std::log(kMaxTemperature)).exp();
}

LossBundle compute_losses(STNet& model, const TrainingBatch& batch, Modality modality,
                          const std::set<LossKind>& enabled) {
  const auto& cfg = model->config();
  if (modality != Modality::sketch_text) {
    for (auto kind : enabled) {
      require(kind == LossKind::ct, ErrorCode::invalid_argument,
              "single-modality training supports only the contrastive loss");
    }
  }
  const auto n = batch.text_ids.defined() ? batch.text_ids.size(0) : batch.images.size(0);
  require(batch.images.size(0) == n && batch.labels.size(0) == n &&
              static_cast<std::int64_t>(batch.boxes.size()) == n,
          ErrorCode::shape_mismatch, "compute_losses: batch fields disagree on N");

  std::map<LossKind, torch::Tensor> components;
  std::map<LossKind, double> weights;
  for (auto kind : enabled) weights[kind] = cfg.loss_weight(kind);
  const bool ct = enabled.contains(LossKind::ct);

  if (modality != Modality::sketch_text) {
    if (ct) {
      auto query = modality == Modality::sketch_only ? model->sketch_embedding(batch.sketches)
                                                     : model->text_embedding(batch.text_ids);
      auto images = spatial_mean_pool(model->image_tokens(batch.images));
      components[LossKind::ct] = contrastive_loss(query, images, model->log_temperature);
    }
    return total_loss(components, weights);
  }

  const bool cls_t = enabled.contains(LossKind::cls_t);
  const bool cls_i = enabled.contains(LossKind::cls_i);
  const bool od = enabled.contains(LossKind::od);
  const bool sr = enabled.contains(LossKind::sr);
  if (!(ct || cls_t || cls_i || od || sr)) return total_loss(components, weights);

  torch::Tensor h_text;
  if (ct || cls_t) h_text = model->text_embedding(batch.text_ids);
  if (cls_t) components[LossKind::cls_t] = classification_loss(model->classify(h_text, HeadKind::text), batch.labels);
  if (!(ct || cls_i || od || sr)) return total_loss(components, weights);

  auto h_sketch = model->sketch_embedding(batch.sketches);
  auto tokens = model->image_tokens(batch.images);
  if (ct) {
    components[LossKind::ct] =
        contrastive_loss(h_text, pairwise_attention_pool(tokens, h_sketch), model->log_temperature);
  }
  if (cls_i || od || sr) {
    auto attention = sketch_guided_attention(tokens, h_sketch);
    if (cls_i) {
      components[LossKind::cls_i] =
          classification_loss(model->classify(attention.pooled, HeadKind::image), batch.labels);
    }
    if (od) {
      std::vector<std::vector<DetectionTarget>> targets;
      auto labels = batch.labels.to(torch::kInt64);
      for (std::int64_t i = 0; i < n; ++i) {
        targets.push_back({{batch.boxes[static_cast<std::size_t>(i)], labels[i].item<std::int64_t>()}});
      }
      DetectionLossOptions options{cfg.lambda_coord, cfg.lambda_noobj, cfg.od_class_cross_entropy};
      components[LossKind::od] = detection_loss(model->detector->forward(attention.attended), targets, options);
    }
    if (sr) {
      components[LossKind::sr] = reconstruction_loss(model->decoder->forward(attention.attended),
                                                     dilate_strokes(batch.sketches, cfg.sketch_dilation),
                                                     cfg.sr_alpha, cfg.sr_beta);
    }
  }
  return total_loss(components, weights);
}

torch::Tensor query_embedding(STNet& model, Modality modality, const torch::Tensor& text_ids,
                              const torch::Tensor& sketches) {
  return modality == Modality::sketch_only ? model->sketch_embedding(sketches)
                                           : model->text_embedding(text_ids);
}

}  // namespace cstbir
