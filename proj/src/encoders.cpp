#include "cstbir/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "cstbir/error.hpp"

namespace cstbir {

namespace F = torch::nn::functional;

TransformerBlockImpl::TransformerBlockImpl(int dim, int heads, int mlp_ratio) : heads_(heads) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj_ = register_module("proj", torch::nn::Linear(dim, dim));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1_ = register_module("fc1", torch::nn::Linear(dim, mlp_ratio * dim));
  fc2_ = register_module("fc2", torch::nn::Linear(mlp_ratio * dim, dim));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& key_mask) {
  const auto batch = x.size(0), len = x.size(1), dim = x.size(2);
  const auto head_dim = dim / heads_;
  auto qkv = qkv_(norm1_(x)).view({batch, len, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = qkv[0], k = qkv[1], v = qkv[2];
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  if (key_mask.defined()) {
    scores = scores.masked_fill(key_mask.view({batch, 1, 1, len}),
                                -std::numeric_limits<double>::infinity());
  }
  auto attended = torch::matmul(torch::softmax(scores, -1), v).permute({0, 2, 1, 3}).reshape({batch, len, dim});
  auto h = x + proj_(attended);
  return h + fc2_(F::gelu(fc1_(norm2_(h))));
}

namespace {

// Output gains start at d^-1/4, so the raw dot product of two encoder outputs
// has unit scale at initialization. Gains of 1 give logits with standard
// deviation sqrt(d), which saturates the sketch-guided softmax from step 0.
torch::nn::LayerNorm output_norm(int d) {
  torch::nn::LayerNorm norm(torch::nn::LayerNormOptions({d}));
  torch::NoGradGuard guard;
  norm->weight.fill_(std::pow(static_cast<double>(d), -0.25));
  return norm;
}

}  // namespace

TextEncoderImpl::TextEncoderImpl(const ModelConfig& config)
    : vocab_size_(config.vocab_size), max_len_(config.max_text_len) {
  const int d = config.embed_dim;
  embed_ = register_module("embed", torch::nn::Embedding(config.vocab_size, d));
  position_ = register_parameter("position", torch::randn({config.max_text_len, d}) * 0.02);
  {
    torch::NoGradGuard guard;
    embed_->weight.normal_(0.0, 0.02);
  }
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < config.text_layers; ++i) {
    blocks_->push_back(TransformerBlock(d, config.heads, config.mlp_ratio));
  }
  norm_ = register_module("norm", output_norm(d));
}

torch::Tensor TextEncoderImpl::forward(const torch::Tensor& ids) {
  require(ids.dim() == 2, ErrorCode::shape_mismatch, "text encoder: ids must be [B, L]");
  require(ids.size(1) == max_len_, ErrorCode::shape_mismatch,
          "text encoder: sequence length must equal max_text_len");
  require(ids.numel() == 0 || (ids.min().item<std::int64_t>() >= 0 &&
                               ids.max().item<std::int64_t>() < vocab_size_),
          ErrorCode::out_of_range, "text encoder: token id outside the vocabulary");
  auto x = embed_(ids) + position_.unsqueeze(0);
  auto mask = ids.eq(0);
  for (const auto& block : *blocks_) x = block->as<TransformerBlock>()->forward(x, mask);
  return norm_(x);
}

VisionEncoderImpl::VisionEncoderImpl(const ModelConfig& config, int channels)
    : channels_(channels),
      dilation_(channels == 1 ? config.sketch_dilation : 0),
      image_size_(config.image_size),
      patch_size_(config.patch_size) {
  const int d = config.embed_dim;
  const int g = grid_side();
  patch_embed_ = register_module(
      "patch_embed", torch::nn::Linear(channels * config.patch_size * config.patch_size, d));
  cls_ = register_parameter("cls", torch::randn({d}) * 0.02);
  position_ = register_parameter("position", torch::randn({1 + g * g, d}) * 0.02);
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < config.vision_layers; ++i) {
    blocks_->push_back(TransformerBlock(d, config.heads, config.mlp_ratio));
  }
  norm_ = register_module("norm", output_norm(d));
}

torch::Tensor VisionEncoderImpl::forward(const torch::Tensor& images) {
  require(images.dim() == 4 && images.size(1) == channels_ && images.size(2) == image_size_ &&
              images.size(3) == image_size_,
          ErrorCode::shape_mismatch,
          "vision encoder: expected [B, " + std::to_string(channels_) + ", " +
              std::to_string(image_size_) + ", " + std::to_string(image_size_) + "]");
  const auto batch = images.size(0);
  const int g = grid_side(), p = patch_size_;
  auto patches = (dilate_strokes(images, dilation_) * 2.0 - 1.0)
                     .view({batch, channels_, g, p, g, p})
                     .permute({0, 2, 4, 1, 3, 5})
                     .reshape({batch, g * g, channels_ * p * p});
  auto x = torch::cat({cls_.view({1, 1, -1}).expand({batch, 1, cls_.size(0)}), patch_embed_(patches)}, 1);
  x = x + position_.unsqueeze(0);
  for (const auto& block : *blocks_) x = block->as<TransformerBlock>()->forward(x);
  return norm_(x);
}

torch::Tensor dilate_strokes(const torch::Tensor& sketches, int radius) {
  if (radius <= 0) return sketches;
  return F::max_pool2d(sketches, F::MaxPool2dFuncOptions(2 * radius + 1).stride(1).padding(radius));
}

torch::Tensor sketch_to_tensor(const GrayImage& sketch, int image_size) {
  require(sketch.height == image_size && sketch.width == image_size, ErrorCode::shape_mismatch,
          "sketch raster is " + std::to_string(sketch.height) + "x" + std::to_string(sketch.width) +
              ", expected " + std::to_string(image_size));
  return torch::from_blob(const_cast<float*>(sketch.pixels.data()), {1, 1, image_size, image_size},
                          torch::kFloat32)
      .clone();
}

GrayImage fit_sketch(const GrayImage& sketch, int image_size) {
  require(sketch.height > 0 && sketch.width > 0, ErrorCode::invalid_sketch, "empty sketch raster");
  if (sketch.height == image_size && sketch.width == image_size) return sketch;
  return resize(sketch, image_size, image_size);
}

torch::Tensor fitted_sketch_tensor(const GrayImage& sketch, int image_size) {
  return sketch_to_tensor(fit_sketch(sketch, image_size), image_size);
}

torch::Tensor image_to_tensor(const RgbImage& image, int image_size) {
  require(image.height > 0 && image.width > 0 &&
              image.data.size() == static_cast<std::size_t>(image.height) * image.width * 3,
          ErrorCode::invalid_argument, "image is not a 3-channel RGB raster");
  const RgbImage sized = resize(image, image_size, image_size);
  auto hwc = torch::from_blob(const_cast<std::uint8_t*>(sized.data.data()),
                              {image_size, image_size, 3}, torch::kUInt8);
  return hwc.permute({2, 0, 1}).unsqueeze(0).to(torch::kFloat32).div(255.0).contiguous();
}

torch::Tensor ids_to_tensor(const std::vector<std::int64_t>& ids) {
  return torch::tensor(ids, torch::kInt64).unsqueeze(0);
}

TokenGrid encode_text(TextEncoder& encoder, const std::vector<std::int64_t>& ids, int max_text_len) {
  require(static_cast<int>(ids.size()) == max_text_len, ErrorCode::shape_mismatch,
          "encode_text: expected " + std::to_string(max_text_len) + " ids");
  return {encoder->forward(ids_to_tensor(ids))[0], TokenLayout::text, 0};
}

TokenGrid encode_sketch(VisionEncoder& encoder, const SketchRaster& sketch, int image_size) {
  return {encoder->forward(sketch_to_tensor(sketch.pixels, image_size))[0], TokenLayout::vision,
          encoder->grid_side()};
}

TokenGrid encode_image(VisionEncoder& encoder, const RgbImage& image, int image_size) {
  return {encoder->forward(image_to_tensor(image, image_size))[0], TokenLayout::vision,
          encoder->grid_side()};
}

// ---- pretraining ----------------------------------------------------------------

SketchClassifierImpl::SketchClassifierImpl(const ModelConfig& config, int n_classes) {
  encoder = register_module("encoder", VisionEncoder(config, 1));
  head = register_module("head", torch::nn::Linear(config.embed_dim, n_classes));
}

torch::Tensor SketchClassifierImpl::embed(const torch::Tensor& sketches) {
  return encoder->forward(sketches).select(1, 0);
}

torch::Tensor SketchClassifierImpl::forward(const torch::Tensor& sketches) {
  return head->forward(embed(sketches));
}

namespace {

torch::Tensor stack_sketches(const std::vector<SketchRaster>& sketches,
                             const std::vector<std::size_t>& indices, int image_size) {
  std::vector<torch::Tensor> parts;
  parts.reserve(indices.size());
  for (auto i : indices) parts.push_back(fitted_sketch_tensor(sketches[i].pixels, image_size));
  return torch::cat(parts, 0);
}

std::pair<double, double> evaluate_classifier(SketchClassifier& model,
                                              const std::vector<SketchRaster>& sketches,
                                              const std::vector<std::int64_t>& labels, int image_size) {
  torch::NoGradGuard guard;
  model->eval();
  double loss = 0, correct = 0;
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < sketches.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, sketches.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    auto logits = model->forward(stack_sketches(sketches, idx, image_size));
    auto target = torch::tensor(std::vector<std::int64_t>(labels.begin() + static_cast<long>(start),
                                                          labels.begin() + static_cast<long>(start + idx.size())),
                                torch::kInt64);
    loss += F::cross_entropy(logits, target, F::CrossEntropyFuncOptions().reduction(torch::kSum))
                .item<double>();
    correct += logits.argmax(1).eq(target).sum().item<double>();
  }
  model->train();
  const auto n = static_cast<double>(sketches.size());
  return {loss / n, correct / n};
}

}  // namespace

PretrainResult pretrain_sketch_classifier(const std::vector<SketchRaster>& sketches,
                                          const ModelConfig& config, const PretrainConfig& options) {
  config.validate();
  std::map<std::string, std::size_t> counts;
  for (const auto& s : sketches) ++counts[s.category];
  require(counts.size() >= 2, ErrorCode::invalid_argument,
          "pretrain: need at least two sketch categories");
  for (const auto& [name, n] : counts) {
    require(n >= 2, ErrorCode::invalid_argument, "pretrain: category '" + name + "' has fewer than 2 sketches");
  }
  require(options.epochs >= 0 && options.batch_size >= 1, ErrorCode::invalid_argument,
          "pretrain: invalid epochs or batch size");

  PretrainResult result;
  for (const auto& [name, _] : counts) result.categories.push_back(name);
  std::vector<std::int64_t> labels;
  labels.reserve(sketches.size());
  for (const auto& s : sketches) {
    labels.push_back(std::lower_bound(result.categories.begin(), result.categories.end(), s.category) -
                     result.categories.begin());
  }

  torch::manual_seed(options.seed);
  result.model = SketchClassifier(config, static_cast<int>(result.categories.size()));
  std::tie(result.initial_loss, result.initial_accuracy) =
      evaluate_classifier(result.model, sketches, labels, config.image_size);

  torch::optim::Adam optimizer(result.model->parameters(), torch::optim::AdamOptions(options.learning_rate));
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(sketches.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch_size = static_cast<std::size_t>(options.batch_size);
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                   order.begin() + static_cast<long>(std::min(order.size(), start + batch_size)));
      std::vector<std::int64_t> target;
      for (auto i : idx) target.push_back(labels[i]);
      optimizer.zero_grad();
      auto logits = result.model->forward(stack_sketches(sketches, idx, config.image_size));
      auto loss = F::cross_entropy(logits, torch::tensor(target, torch::kInt64));
      loss.backward();
      optimizer.step();
    }
    auto [loss, accuracy] = evaluate_classifier(result.model, sketches, labels, config.image_size);
    result.history.push_back({epoch, loss, accuracy});
  }
  result.model->eval();
  return result;
}

}  // namespace cstbir
