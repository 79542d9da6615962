#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

namespace cstbir {

struct AttentionOutput {
  torch::Tensor alpha;     // [B, 1 + m], softmax over CLS and spatial tokens
  torch::Tensor attended;  // [B, 1 + m, d], alpha-scaled tokens
  torch::Tensor pooled;    // [B, d], mean of the m spatial attended tokens
};

// Dot-product attention of the sketch CLS embedding over image tokens.
// Accepts batched ([B, 1+m, d], [B, d]) or single ([1+m, d], [d]) inputs;
// single inputs yield outputs without the batch dimension.
AttentionOutput sketch_guided_attention(const torch::Tensor& image_tokens,
                                        const torch::Tensor& sketch_cls);

// Pooled embedding of every image under every sketch: [Q, N, d] for tokens
// [N, 1+m, d] and sketches [Q, d].
torch::Tensor pairwise_attention_pool(const torch::Tensor& image_tokens,
                                      const torch::Tensor& sketch_cls);

// Sketch-free pooling: plain mean of the spatial tokens, [B, d].
torch::Tensor spatial_mean_pool(const torch::Tensor& image_tokens);

enum class HeadKind { text, image };
HeadKind parse_head(const std::string& name);

// S x S x (5B + C) prediction grid. Per cell: B boxes of (x, y, w, h,
// confidence) squashed to [0, 1], then C raw class scores.
struct DetectionGrid {
  torch::Tensor values;  // [batch, S, S, 5B + C]
  int grid = 0;
  int boxes = 0;
  int classes = 0;

  int channels() const { return 5 * boxes + classes; }
};

class DetectionHeadImpl : public torch::nn::Module {
 public:
  // Initial confidence bias; sigmoid(-4) ~ 0.018.
  static constexpr double kConfidencePriorLogit = -4.0;

  DetectionHeadImpl(int dim, int token_grid, int od_grid, int boxes, int classes);
  DetectionGrid forward(const torch::Tensor& attended);

 private:
  int token_grid_, od_grid_, boxes_, classes_;
  torch::nn::Conv2d cell_{nullptr};
};
TORCH_MODULE(DetectionHead);

// Eight Conv-BatchNorm-ReLU blocks; upsampling blocks (stride-2 transposed
// convolution) interleaved with stride-1 refinement blocks, then a 1x1
// projection to one logit channel at out_size x out_size.
class SketchDecoderImpl : public torch::nn::Module {
 public:
  static constexpr int kBlocks = 8;

  SketchDecoderImpl(int dim, int token_grid, int out_size, int min_channels);
  torch::Tensor forward(const torch::Tensor& attended);  // [B, 1, out, out]

  int upsample_blocks() const { return upsample_blocks_; }
  int refine_blocks() const { return kBlocks - upsample_blocks_; }
  bool resize_inserted() const { return resize_size_ > 0; }
  const std::vector<bool>& schedule() const { return schedule_; }

 private:
  int token_grid_, out_size_;
  int upsample_blocks_ = 0;
  int resize_size_ = 0;  // nearest resize before the final block when > 0
  std::vector<bool> schedule_;
  torch::nn::ModuleList blocks_;
  torch::nn::Conv2d project_{nullptr};
};
TORCH_MODULE(SketchDecoder);

}  // namespace cstbir
