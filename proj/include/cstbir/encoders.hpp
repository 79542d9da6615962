#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cstbir/config.hpp"
#include "cstbir/dataset.hpp"
#include "cstbir/image.hpp"

namespace cstbir {

enum class TokenLayout { text, vision };

// Encoder output sequence for one input: CLS slot first, then subwords or
// patches (row-major over the g x g patch grid).
struct TokenGrid {
  torch::Tensor tokens;  // [1 + n, d]
  TokenLayout layout = TokenLayout::vision;
  int grid_side = 0;     // vision only

  torch::Tensor cls() const { return tokens[0]; }
  std::int64_t length() const { return tokens.size(0); }
};

// Pre-norm transformer block; `key_mask` is [B, L] with true marking keys
// that must not be attended (padding).
class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int dim, int heads, int mlp_ratio);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& key_mask = {});

 private:
  int heads_;
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Linear qkv_{nullptr}, proj_{nullptr}, fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TransformerBlock);

class TextEncoderImpl : public torch::nn::Module {
 public:
  explicit TextEncoderImpl(const ModelConfig& config);
  // ids [B, L] -> [B, L, d]; position 0 carries CLS.
  torch::Tensor forward(const torch::Tensor& ids);
  int vocab_size() const { return vocab_size_; }

 private:
  int vocab_size_;
  int max_len_;
  torch::nn::Embedding embed_{nullptr};
  torch::Tensor position_;
  torch::nn::ModuleList blocks_;
  torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(TextEncoder);

// ViT-style encoder over non-overlapping square patches.
class VisionEncoderImpl : public torch::nn::Module {
 public:
  VisionEncoderImpl(const ModelConfig& config, int channels);
  // images [B, C, S, S] with values in [0, 1] -> [B, 1 + g*g, d]
  torch::Tensor forward(const torch::Tensor& images);
  int grid_side() const { return image_size_ / patch_size_; }
  int channels() const { return channels_; }

 private:
  int channels_;
  int dilation_;
  int image_size_;
  int patch_size_;
  torch::nn::Linear patch_embed_{nullptr};
  torch::Tensor cls_, position_;
  torch::nn::ModuleList blocks_;
  torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(VisionEncoder);

// Stroke-width normalization: (2r+1) x (2r+1) max filter, identity for r = 0.
torch::Tensor dilate_strokes(const torch::Tensor& sketches, int radius);

// [1, 1, S, S]; the raster must already be image_size x image_size.
torch::Tensor sketch_to_tensor(const GrayImage& sketch, int image_size);
// Area-resizes a raster of any size to image_size x image_size (identity when it already fits).
GrayImage fit_sketch(const GrayImage& sketch, int image_size);
// sketch_to_tensor(fit_sketch(sketch, image_size), image_size)
torch::Tensor fitted_sketch_tensor(const GrayImage& sketch, int image_size);
// [1, 3, S, S] in [0, 1]; resized to image_size first.
torch::Tensor image_to_tensor(const RgbImage& image, int image_size);
// [1, L]
torch::Tensor ids_to_tensor(const std::vector<std::int64_t>& ids);

TokenGrid encode_text(TextEncoder& encoder, const std::vector<std::int64_t>& ids, int max_text_len);
TokenGrid encode_sketch(VisionEncoder& encoder, const SketchRaster& sketch, int image_size);
TokenGrid encode_image(VisionEncoder& encoder, const RgbImage& image, int image_size);

// ---- sketch-classification pretraining ------------------------------------

class SketchClassifierImpl : public torch::nn::Module {
 public:
  SketchClassifierImpl(const ModelConfig& config, int n_classes);
  torch::Tensor forward(const torch::Tensor& sketches);  // logits [B, n_classes]
  torch::Tensor embed(const torch::Tensor& sketches);    // CLS output [B, d]

  VisionEncoder encoder{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(SketchClassifier);

struct PretrainConfig {
  int epochs = 5;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct PretrainEpoch {
  int epoch = 0;
  double loss = 0;      // eval-mode mean cross-entropy over the training set
  double accuracy = 0;  // eval-mode training accuracy in [0, 1]
};

struct PretrainResult {
  SketchClassifier model{nullptr};
  std::vector<std::string> categories;
  double initial_loss = 0;
  double initial_accuracy = 0;
  std::vector<PretrainEpoch> history;
};

// Categories are the sorted distinct labels of `sketches`.
PretrainResult pretrain_sketch_classifier(const std::vector<SketchRaster>& sketches,
                                          const ModelConfig& config, const PretrainConfig& options);

}  // namespace cstbir
