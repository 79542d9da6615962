#include "cstbir/config.hpp"

#include "cstbir/error.hpp"

namespace cstbir {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::ct: return "CT";
    case LossKind::cls_t: return "CLS_T";
    case LossKind::cls_i: return "CLS_I";
    case LossKind::od: return "OD";
    case LossKind::sr: return "SR";
  }
  return "CT";
}

LossKind parse_loss(const std::string& name) {
  for (auto kind : all_losses()) {
    if (to_string(kind) == name) return kind;
  }
  fail(ErrorCode::invalid_argument, "unknown loss: " + name);
}

const std::set<LossKind>& all_losses() {
  static const std::set<LossKind> losses = {LossKind::ct, LossKind::cls_t, LossKind::cls_i,
                                            LossKind::od, LossKind::sr};
  return losses;
}

std::string to_string(Modality modality) {
  switch (modality) {
    case Modality::sketch_only: return "sketch_only";
    case Modality::text_only: return "text_only";
    case Modality::sketch_text: return "sketch_text";
  }
  return "sketch_text";
}

Modality parse_modality(const std::string& name) {
  if (name == "sketch_only") return Modality::sketch_only;
  if (name == "text_only") return Modality::text_only;
  if (name == "sketch_text") return Modality::sketch_text;
  fail(ErrorCode::invalid_argument, "unknown modality: " + name);
}

double ModelConfig::loss_weight(LossKind kind) const {
  auto it = loss_weights.find(to_string(kind));
  return it == loss_weights.end() ? 1.0 : it->second;
}

void ModelConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    require(ok, ErrorCode::invalid_argument, "model config: " + what);
  };
  check(embed_dim > 0 && heads > 0 && embed_dim % heads == 0, "embed_dim must be divisible by heads");
  check(patch_size > 0 && image_size > 0 && image_size % patch_size == 0,
        "image_size must be divisible by patch_size");
  check(text_layers >= 0 && vision_layers >= 0 && mlp_ratio > 0, "layer counts must be nonnegative");
  check(vocab_size > 2 && max_text_len >= 1, "vocab_size and max_text_len");
  check(n_categories >= 2, "n_categories must be >= 2");
  check(od_grid >= 1 && od_boxes >= 1, "od_grid and od_boxes must be >= 1");
  check(temperature_init >= 0.01 && temperature_init <= 100, "temperature_init outside [0.01, 100]");
  check(sr_alpha >= 0 && sr_beta >= 0, "sr weights must be nonnegative");
  check(decoder_min_channels >= 1, "decoder_min_channels must be >= 1");
  check(sketch_dilation >= 0 && 2 * sketch_dilation < patch_size, "sketch_dilation must be in [0, patch_size / 2)");
  for (const auto& [name, w] : loss_weights) {
    parse_loss(name);
    check(w >= 0, "negative loss weight for " + name);
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"embed_dim", c.embed_dim},
       {"text_layers", c.text_layers},
       {"vision_layers", c.vision_layers},
       {"heads", c.heads},
       {"mlp_ratio", c.mlp_ratio},
       {"patch_size", c.patch_size},
       {"image_size", c.image_size},
       {"vocab_size", c.vocab_size},
       {"max_text_len", c.max_text_len},
       {"n_categories", c.n_categories},
       {"od_grid", c.od_grid},
       {"od_boxes", c.od_boxes},
       {"decoder_min_channels", c.decoder_min_channels},
       {"sketch_dilation", c.sketch_dilation},
       {"temperature_init", c.temperature_init},
       {"sr_alpha", c.sr_alpha},
       {"sr_beta", c.sr_beta},
       {"lambda_coord", c.lambda_coord},
       {"lambda_noobj", c.lambda_noobj},
       {"od_class_cross_entropy", c.od_class_cross_entropy},
       {"loss_weights", c.loss_weights},
       {"pretrained", c.pretrained}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.text_layers = j.value("text_layers", d.text_layers);
  c.vision_layers = j.value("vision_layers", d.vision_layers);
  c.heads = j.value("heads", d.heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.image_size = j.value("image_size", d.image_size);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_text_len = j.value("max_text_len", d.max_text_len);
  c.n_categories = j.value("n_categories", d.n_categories);
  c.od_grid = j.value("od_grid", d.od_grid);
  c.od_boxes = j.value("od_boxes", d.od_boxes);
  c.decoder_min_channels = j.value("decoder_min_channels", d.decoder_min_channels);
  c.sketch_dilation = j.value("sketch_dilation", d.sketch_dilation);
  c.temperature_init = j.value("temperature_init", d.temperature_init);
  c.sr_alpha = j.value("sr_alpha", d.sr_alpha);
  c.sr_beta = j.value("sr_beta", d.sr_beta);
  c.lambda_coord = j.value("lambda_coord", d.lambda_coord);
  c.lambda_noobj = j.value("lambda_noobj", d.lambda_noobj);
  c.od_class_cross_entropy = j.value("od_class_cross_entropy", d.od_class_cross_entropy);
  c.loss_weights = j.value("loss_weights", d.loss_weights);
  c.pretrained = j.value("pretrained", d.pretrained);
}

}  // namespace cstbir
