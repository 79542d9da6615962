#pragma once

#include <map>
#include <set>
#include <string>

#include <json.hpp>

namespace cstbir {

enum class LossKind { ct, cls_t, cls_i, od, sr };

std::string to_string(LossKind kind);
LossKind parse_loss(const std::string& name);
const std::set<LossKind>& all_losses();

enum class Modality { sketch_only, text_only, sketch_text };

std::string to_string(Modality modality);
Modality parse_modality(const std::string& name);

// Architecture and objective hyperparameters shared by every STNet component.
struct ModelConfig {
  int embed_dim = 64;
  int text_layers = 2;
  int vision_layers = 2;
  int heads = 4;
  int mlp_ratio = 4;
  int patch_size = 16;
  int image_size = 224;
  int vocab_size = 2000;
  int max_text_len = 16;
  int n_categories = 258;
  int od_grid = 7;
  int od_boxes = 2;
  int decoder_min_channels = 8;
  // Sketch strokes are max-dilated by this radius before encoding and as the
  // reconstruction target; 1-px strokes are too sparse for linear patch embedding.
  int sketch_dilation = 1;
  double temperature_init = 0.07;
  double sr_alpha = 1.0;
  double sr_beta = 1.0;
  double lambda_coord = 5.0;
  double lambda_noobj = 0.5;
  bool od_class_cross_entropy = false;
  std::map<std::string, double> loss_weights = {
      {"CT", 1.0}, {"CLS_T", 1.0}, {"CLS_I", 1.0}, {"OD", 1.0}, {"SR", 1.0}};
  // Optional pretrained weights keyed by component ("text", "sketch", "image").
  std::map<std::string, std::string> pretrained;

  int grid_side() const { return image_size / patch_size; }
  int patches() const { return grid_side() * grid_side(); }
  int detection_channels() const { return 5 * od_boxes + n_categories; }
  double loss_weight(LossKind kind) const;
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace cstbir
