#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "cstbir/checkpoint.hpp"
#include "cstbir/dataset.hpp"
#include "cstbir/image.hpp"

namespace cstbir {

// attention: per-image spatial token sets are kept so the query sketch can
// re-pool every image. static_mean: only sketch-free mean-pooled rows (faster,
// but ignores the sketch when pooling).
enum class IndexLayout { static_mean = 0, attention = 1 };

std::string to_string(IndexLayout layout);
IndexLayout parse_layout(const std::string& name);

struct GalleryIndex {
  std::vector<std::string> image_ids;  // ascending build order, unique
  torch::Tensor embeddings;            // [N, d], unit rows of the mean-pooled tokens
  torch::Tensor tokens;                // [N, 1+m, d]; defined only for the attention layout
  std::string model_fingerprint;
  IndexLayout layout = IndexLayout::static_mean;

  std::size_t size() const { return image_ids.size(); }
};

// The index layout a model needs by default: attention for sketch+text models.
IndexLayout default_layout(const LoadedModel& model);

GalleryIndex build_index(const std::vector<std::pair<std::string, RgbImage>>& images, LoadedModel& model,
                         IndexLayout layout);
// Every *.png / *.jpg / *.jpeg file in `dir`; the id is the file stem.
std::vector<std::pair<std::string, RgbImage>> read_gallery_dir(const std::filesystem::path& dir);

// "CSTB" | u32 version | u64 N | u64 d | u8 layout | u64 L | ids (u32 length + bytes)
// | f32 rows | f32 tokens (attention layout) | u32 fingerprint length + bytes | u32 CRC-32.
std::string serialize_index(const GalleryIndex& index);
GalleryIndex parse_index(const std::string& bytes);
void write_index(const std::filesystem::path& path, const GalleryIndex& index);
GalleryIndex read_index(const std::filesystem::path& path);

// Encoded query vectors, [Q, d] each. `sketch` is undefined when the query
// side never conditions image pooling.
struct QueryBatch {
  torch::Tensor query;
  torch::Tensor sketch;
};

QueryBatch encode_queries(LoadedModel& model, const std::vector<std::string>& texts,
                          const std::vector<const GrayImage*>& sketches);

// Cosine similarities [Q, N]. Attention re-pooling applies when `q.sketch` is
// defined and the index carries tokens; otherwise the static rows are used.
torch::Tensor score_gallery(const GalleryIndex& index, const QueryBatch& q);

struct ScoredImage {
  std::string image_id;
  double score = 0;
};

struct RankedResults {
  std::string query_id;
  std::vector<ScoredImage> results;  // top k, scores non-increasing, ties by ascending id
  std::optional<std::size_t> gt_rank;
};

// Full ordering of one score row: descending score, then ascending id.
std::vector<std::size_t> rank_order(const std::vector<double>& scores, const std::vector<std::string>& ids);
// 1 + #{strictly higher score} + #{equal score with a smaller id}.
std::size_t rank_of(const std::vector<double>& scores, const std::vector<std::string>& ids, std::size_t target);

RankedResults rank_results(const std::vector<double>& scores, const std::vector<std::string>& ids, std::size_t k,
                           const std::optional<std::string>& target = std::nullopt);

struct SearchQuery {
  std::string query_id;
  std::string text;
  const GrayImage* sketch = nullptr;
  std::optional<std::string> target_image;
};

RankedResults search(const GalleryIndex& index, LoadedModel& model, const SearchQuery& query, std::size_t k);

double recall_at_k(const std::vector<std::size_t>& gt_ranks, std::size_t k);
double median_rank(const std::vector<std::size_t>& gt_ranks);

struct MetricsReport {
  std::string split;
  std::size_t n_queries = 0;
  std::size_t gallery_size = 0;
  std::map<std::size_t, double> recall_at;
  double median_rank = 0;
  std::vector<std::pair<std::string, std::size_t>> ranks;  // (query_id, gt_rank)
};

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_ranks(const std::string& split, std::size_t gallery_size,
                                const std::vector<std::pair<std::string, std::size_t>>& ranks,
                                const std::vector<std::size_t>& ks);

// Ranks every query of `split` against that split's gallery.
MetricsReport evaluate(LoadedModel& model, const Corpus& corpus, Split split, const std::vector<std::size_t>& ks,
                       std::optional<IndexLayout> layout = std::nullopt);

}  // namespace cstbir
