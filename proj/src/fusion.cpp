#include "cstbir/fusion.hpp"

#include <cmath>

#include "cstbir/error.hpp"
#include "log.hpp"

namespace cstbir {

namespace F = torch::nn::functional;

AttentionOutput sketch_guided_attention(const torch::Tensor& image_tokens,
                                        const torch::Tensor& sketch_cls) {
  const bool single = image_tokens.dim() == 2;
  auto tokens = single ? image_tokens.unsqueeze(0) : image_tokens;
  auto sketch = single ? sketch_cls.unsqueeze(0) : sketch_cls;
  require(tokens.dim() == 3 && sketch.dim() == 2 && tokens.size(0) == sketch.size(0) &&
              tokens.size(2) == sketch.size(1),
          ErrorCode::shape_mismatch, "sketch_guided_attention: dimension mismatch");
  require(tokens.size(1) >= 2, ErrorCode::shape_mismatch,
          "sketch_guided_attention: need CLS plus at least one spatial token");

  auto logits = torch::bmm(tokens, sketch.unsqueeze(2)).squeeze(2);
  auto alpha = torch::softmax(logits, 1);
  auto attended = tokens * alpha.unsqueeze(2);
  auto pooled = attended.slice(1, 1).mean(1);
  if (single) return {alpha[0], attended[0], pooled[0]};
  return {alpha, attended, pooled};
}

torch::Tensor pairwise_attention_pool(const torch::Tensor& image_tokens,
                                      const torch::Tensor& sketch_cls) {
  require(image_tokens.dim() == 3 && sketch_cls.dim() == 2 &&
              image_tokens.size(2) == sketch_cls.size(1) && image_tokens.size(1) >= 2,
          ErrorCode::shape_mismatch, "pairwise_attention_pool: dimension mismatch");
  const auto spatial = image_tokens.size(1) - 1;
  auto logits = torch::einsum("nld,qd->qnl", {image_tokens, sketch_cls});
  auto alpha = torch::softmax(logits, 2).slice(2, 1);
  return torch::einsum("qnl,nld->qnd", {alpha, image_tokens.slice(1, 1)}) / static_cast<double>(spatial);
}

torch::Tensor spatial_mean_pool(const torch::Tensor& image_tokens) {
  require(image_tokens.dim() == 3 && image_tokens.size(1) >= 2, ErrorCode::shape_mismatch,
          "spatial_mean_pool: expected [B, 1+m, d]");
  return image_tokens.slice(1, 1).mean(1);
}

HeadKind parse_head(const std::string& name) {
  if (name == "text") return HeadKind::text;
  if (name == "image") return HeadKind::image;
  fail(ErrorCode::invalid_argument, "unknown classification head: " + name);
}

namespace {

torch::Tensor spatial_map(const torch::Tensor& attended, int grid) {
  require(attended.dim() == 3 && attended.size(1) == 1 + static_cast<std::int64_t>(grid) * grid,
          ErrorCode::shape_mismatch,
          "expected attended tokens [B, 1 + " + std::to_string(grid * grid) + ", d]");
  const auto batch = attended.size(0), dim = attended.size(2);
  return attended.slice(1, 1).transpose(1, 2).reshape({batch, dim, grid, grid});
}

}  // namespace

DetectionHeadImpl::DetectionHeadImpl(int dim, int token_grid, int od_grid, int boxes, int classes)
    : token_grid_(token_grid), od_grid_(od_grid), boxes_(boxes), classes_(classes) {
  require(od_grid >= 1 && boxes >= 1 && classes >= 1, ErrorCode::invalid_argument,
          "detection head: S, B and C must be positive");
  require(token_grid >= od_grid, ErrorCode::invalid_argument,
          "detection head: token grid " + std::to_string(token_grid) + " smaller than S = " +
              std::to_string(od_grid));
  cell_ = register_module("cell", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, 5 * boxes + classes, 1)));
  // Low object prior: start confidences near 0 so the no-object term does not
  // dominate early gradients.
  torch::NoGradGuard guard;
  for (int b = 0; b < boxes; ++b) cell_->bias[5 * b + 4].fill_(kConfidencePriorLogit);
}

DetectionGrid DetectionHeadImpl::forward(const torch::Tensor& attended) {
  auto map = spatial_map(attended, token_grid_);
  if (token_grid_ % od_grid_ == 0) {
    const int k = token_grid_ / od_grid_;
    if (k > 1) map = F::avg_pool2d(map, F::AvgPool2dFuncOptions(k));
  } else {
    map = F::adaptive_avg_pool2d(map, F::AdaptiveAvgPool2dFuncOptions(od_grid_));
  }
  auto raw = cell_(map).permute({0, 2, 3, 1});
  auto values = torch::cat({torch::sigmoid(raw.slice(3, 0, 5 * boxes_)), raw.slice(3, 5 * boxes_)}, 3);
  return {values, od_grid_, boxes_, classes_};
}

SketchDecoderImpl::SketchDecoderImpl(int dim, int token_grid, int out_size, int min_channels)
    : token_grid_(token_grid), out_size_(out_size) {
  require(token_grid >= 1 && out_size >= token_grid, ErrorCode::invalid_argument,
          "sketch decoder: output must be at least the token grid size");
  while ((token_grid << upsample_blocks_) < out_size) ++upsample_blocks_;
  require(upsample_blocks_ <= kBlocks, ErrorCode::invalid_argument,
          "sketch decoder: more than eight doublings required");

  int ups_left = upsample_blocks_, refine_left = kBlocks - upsample_blocks_;
  for (int k = 0; k < kBlocks; ++k) {
    const bool up = ups_left > 0 && (refine_left == 0 || k % 2 == 0);
    schedule_.push_back(up);
    (up ? ups_left : refine_left)--;
  }

  if ((token_grid << upsample_blocks_) != out_size) {
    const bool last_up = schedule_.back();
    resize_size_ = last_up ? out_size / 2 : out_size;
    if (last_up && out_size % 2 != 0) resize_size_ = out_size;  // odd target: resize after the block
    detail::log_warning("sketch decoder: token grid " + std::to_string(token_grid) +
                        " does not double to " + std::to_string(out_size) +
                        "; inserting nearest resize before the final block");
  }

  blocks_ = register_module("blocks", torch::nn::ModuleList());
  int channels = dim;
  for (bool up : schedule_) {
    torch::nn::Sequential block;
    if (up) {
      const int next = std::max(min_channels, channels / 2);
      block->push_back(torch::nn::ConvTranspose2d(
          torch::nn::ConvTranspose2dOptions(channels, next, 4).stride(2).padding(1).bias(false)));
      channels = next;
    } else {
      block->push_back(
          torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1).bias(false)));
    }
    block->push_back(torch::nn::BatchNorm2d(channels));
    block->push_back(torch::nn::ReLU());
    blocks_->push_back(block);
  }
  project_ = register_module("project", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 1, 1)));
}

torch::Tensor SketchDecoderImpl::forward(const torch::Tensor& attended) {
  auto x = spatial_map(attended, token_grid_);
  for (std::size_t k = 0; k < blocks_->size(); ++k) {
    const bool final_block = k + 1 == blocks_->size();
    if (final_block && resize_size_ > 0 && (resize_size_ * (schedule_[k] ? 2 : 1) == out_size_)) {
      x = F::interpolate(x, F::InterpolateFuncOptions()
                                .size(std::vector<std::int64_t>{resize_size_, resize_size_})
                                .mode(torch::kNearest));
    }
    x = blocks_[k]->as<torch::nn::Sequential>()->forward(x);
  }
  if (x.size(2) != out_size_) {
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<std::int64_t>{out_size_, out_size_})
                              .mode(torch::kNearest));
  }
  return project_(x);
}

}  // namespace cstbir
