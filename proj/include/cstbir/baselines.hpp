#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cstbir/checkpoint.hpp"
#include "cstbir/dataset.hpp"
#include "cstbir/retrieval.hpp"

namespace cstbir {

// category -> descriptions. File format: UTF-8 "category<TAB>description"
// lines; blank lines and lines starting with '#' are ignored.
struct DescriptionTable {
  std::map<std::string, std::vector<std::string>> entries;

  // Every description has 4..10 words and never names its own category.
  void validate() const;
  static DescriptionTable parse(const std::string& text);
  static DescriptionTable read(const std::filesystem::path& path);
  std::string serialize() const;
};

struct Classification {
  std::string category;
  double confidence = 0;
};

class SketchCategoryClassifier {
 public:
  virtual ~SketchCategoryClassifier() = default;
  virtual Classification classify(const GrayImage& sketch) = 0;
  virtual const std::vector<std::string>& universe() const = 0;
};

// argmax of a pretrained sketch-classification head; confidence is its softmax.
class TrainedHeadClassifier : public SketchCategoryClassifier {
 public:
  explicit TrainedHeadClassifier(LoadedClassifier classifier);
  Classification classify(const GrayImage& sketch) override;
  const std::vector<std::string>& universe() const override { return classifier_.categories; }

 private:
  LoadedClassifier classifier_;
};

// Maps a batch of sketches [B, 1, S, S] to embeddings [B, d].
using SketchEmbedder = std::function<torch::Tensor(const torch::Tensor&)>;

// Cosine-nearest class-mean embedding; confidence is the softmax over the
// cosine similarities to every class mean.
class NearestClassMeanClassifier : public SketchCategoryClassifier {
 public:
  NearestClassMeanClassifier(SketchEmbedder embedder, int image_size, const std::vector<SketchRaster>& exemplars);
  Classification classify(const GrayImage& sketch) override;
  const std::vector<std::string>& universe() const override { return categories_; }
  const torch::Tensor& means() const { return means_; }

 private:
  SketchEmbedder embedder_;
  int image_size_;
  std::vector<std::string> categories_;
  torch::Tensor means_;  // [C, d], unit rows
};

// Always answers the same category with confidence 1 (oracle or corruption
// stand-in).
class FixedClassifier : public SketchCategoryClassifier {
 public:
  explicit FixedClassifier(std::string category);
  Classification classify(const GrayImage&) override { return {universe_[0], 1.0}; }
  const std::vector<std::string>& universe() const override { return universe_; }

 private:
  std::vector<std::string> universe_;
};

enum class CompletionMode { name, description };

std::string to_string(CompletionMode mode);
CompletionMode parse_completion_mode(const std::string& name);

// name: "<category> <text>"; description: "<random description> <text>".
// Empty text yields the inserted part alone.
std::string complete_text(const std::string& text, const std::string& category, CompletionMode mode,
                          const DescriptionTable* table, std::mt19937_64& rng);

// Text-side query embeddings only, for scoring against static index rows.
QueryBatch encode_text_queries(LoadedModel& model, const std::vector<std::string>& texts);

struct TwoStageQuery {
  std::string query_id;
  std::string text;
  const GrayImage* sketch = nullptr;
  std::optional<std::string> target_image;
};

// classify sketch -> complete text -> rank by cosine(text embedding, static image row).
RankedResults two_stage_search(const GalleryIndex& index, LoadedModel& text_model, const TwoStageQuery& query,
                               SketchCategoryClassifier& classifier, CompletionMode mode,
                               const DescriptionTable* table, std::mt19937_64& rng, std::size_t k);

// Evaluates the two-stage baseline on every query of `split`. `classifier_for`
// returns the classifier to use for one query (a shared classifier or a
// per-query oracle).
using ClassifierProvider = std::function<SketchCategoryClassifier&(const CompositeQuery&)>;

MetricsReport evaluate_two_stage(LoadedModel& text_model, const Corpus& corpus, Split split,
                                 const ClassifierProvider& classifier_for, CompletionMode mode,
                                 const DescriptionTable* table, std::uint64_t seed,
                                 const std::vector<std::size_t>& ks);

}  // namespace cstbir
