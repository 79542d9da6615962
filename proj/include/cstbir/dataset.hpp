#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cstbir/image.hpp"

namespace cstbir {

enum class SketchSource { stroke_rasterized, synthetic, file };

struct SketchRaster {
  GrayImage pixels;
  std::string category;
  SketchSource source = SketchSource::file;
};

// Normalized top-left box: 0 <= x,y; x+w <= 1; y+h <= 1; w,h > 0.
struct BoundingBox {
  double x = 0, y = 0, w = 0, h = 0;

  bool valid() const;
  double area() const { return w * h; }
  bool operator==(const BoundingBox&) const = default;
};

enum class Split { train, val, test1k, test5k, open_category };

std::string to_string(Split split);
Split parse_split(const std::string& name);

struct CompositeQuery {
  std::string query_id;
  std::string text;
  std::string sketch_id;
  std::string category;
  std::string image_id;
  BoundingBox bbox;
  Split split = Split::train;
};

struct ImageEntry {
  std::string path;  // relative to the manifest directory
  int width = 0;
  int height = 0;
  Split split = Split::train;
};

struct DatasetManifest {
  std::vector<std::string> categories;
  std::vector<CompositeQuery> entries;
  std::map<std::string, ImageEntry> images;

  std::optional<std::size_t> category_index(const std::string& name) const;
  // Entries of one split; images restricted to that split's gallery.
  DatasetManifest filter(Split split) const;
  // Image ids tagged with `split`, in ascending id order. Includes distractors.
  std::vector<std::string> gallery(Split split) const;
  void validate() const;
};

struct DatasetStats {
  double avg_sentence_words = 0;
  double avg_sentence_tokens = 0;
  std::size_t n_images = 0;
  std::size_t n_sketches = 0;
  std::size_t n_categories = 0;
  std::size_t n_queries = 0;
  double avg_area_covered_pct = 0;
};

// ---- stroke rasterization -------------------------------------------------

struct Point {
  double x = 0, y = 0;
};
using Polyline = std::vector<Point>;

// Aspect-preserving fit into the canvas with a 5% margin on every side,
// drawn as 1-pixel anti-aliased lines (max-blended), background 0.
SketchRaster rasterize_strokes(const std::vector<Polyline>& strokes, int canvas_size,
                               const std::string& category = {});

// Parses one Quick, Draw! simplified-format record: {"word": ..., "key_id": ...,
// "drawing": [[[x...],[y...]], ...]}.
struct StrokeRecord {
  std::string key_id;
  std::string word;
  std::vector<Polyline> drawing;
};
StrokeRecord parse_stroke_record(const std::string& json_line);
std::vector<StrokeRecord> read_stroke_file(const std::filesystem::path& path);

// ---- manifest building ------------------------------------------------------

struct Annotation {
  std::string image_id;
  std::string text;
  std::string object;
  BoundingBox bbox;  // already normalized
  int image_width = 0;
  int image_height = 0;
  std::string image_path;
};

struct SplitSpec {
  std::map<std::string, Split> image_split;  // explicit assignment per image
  Split default_split = Split::train;
  std::set<std::string> open_categories;  // routed to Split::open_category
};

struct BuildReport {
  std::size_t kept = 0;
  std::size_t dropped = 0;
  std::map<std::string, std::size_t> dropped_by_object;
};

struct BuildResult {
  DatasetManifest manifest;
  BuildReport report;
};

BuildResult build_manifest(const std::vector<Annotation>& annotations,
                           const std::map<std::string, std::vector<std::string>>& sketch_pool,
                           const SplitSpec& split_spec, std::uint64_t seed);

class Tokenizer;
DatasetStats compute_stats(const DatasetManifest& manifest, const Tokenizer& tokenizer);

// ---- serialization ------------------------------------------------------------

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
std::string serialize_manifest(const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest(const std::string& text);

// ---- synthetic corpus -------------------------------------------------------

struct SyntheticConfig {
  int n_categories = 8;
  int n_train = 2000;
  int n_val = 0;
  int n_gallery = 64;
  int n_open_categories = 0;
  int n_open_queries = 0;
  int canvas_size = 224;
  int queries_per_image = 2;
  std::uint64_t seed = 7;
};

// Names of the glyph library, in category order.
const std::vector<std::string>& glyph_names();
const std::vector<std::string>& color_names();

// In-memory corpus: every manifest image/sketch id resolves in the maps.
struct Corpus {
  DatasetManifest manifest;
  std::map<std::string, RgbImage> images;
  std::map<std::string, SketchRaster> sketches;
};

Corpus generate_synthetic(const SyntheticConfig& config);
// Writes manifest.jsonl, images/<id>.png and sketches/<id>.png under `root`.
void write_corpus(const std::filesystem::path& root, const Corpus& corpus);
// Loads every image and sketch referenced by the manifest at `manifest_path`.
Corpus load_corpus(const std::filesystem::path& manifest_path);

// ---- batching -----------------------------------------------------------------

// Indices into manifest.entries; target images pairwise distinct and
// (text, category) pairs pairwise distinct.
using Batch = std::vector<std::size_t>;

Batch sample_batch(const DatasetManifest& manifest, std::size_t batch_size, std::mt19937_64& rng);

// Partitions a shuffled epoch into batches that all satisfy the uniqueness
// contract. Batches smaller than two are dropped.
std::vector<Batch> plan_epoch(const DatasetManifest& manifest, std::size_t batch_size,
                              std::mt19937_64& rng);

}  // namespace cstbir
