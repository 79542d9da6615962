#include "cstbir/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <iomanip>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cstbir/error.hpp"
#include "cstbir/tokenizer.hpp"

namespace cstbir {

using nlohmann::json;

bool BoundingBox::valid() const {
  constexpr double tol = 1e-9;
  return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) &&
         x >= 0 && y >= 0 && w > 0 && h > 0 && x + w <= 1 + tol && y + h <= 1 + tol;
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test1k: return "test1k";
    case Split::test5k: return "test5k";
    case Split::open_category: return "open_category";
  }
  return "train";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test1k") return Split::test1k;
  if (name == "test5k") return Split::test5k;
  if (name == "open_category" || name == "open-category") return Split::open_category;
  fail(ErrorCode::invalid_argument, "unknown split: " + name);
}

// ---- manifest ------------------------------------------------------------------

std::optional<std::size_t> DatasetManifest::category_index(const std::string& name) const {
  auto it = std::find(categories.begin(), categories.end(), name);
  if (it == categories.end()) return std::nullopt;
  return static_cast<std::size_t>(it - categories.begin());
}

DatasetManifest DatasetManifest::filter(Split split) const {
  DatasetManifest out;
  out.categories = categories;
  for (const auto& e : entries) {
    if (e.split != split) continue;
    out.entries.push_back(e);
    if (auto it = images.find(e.image_id); it != images.end()) out.images.insert(*it);
  }
  for (const auto& [id, img] : images) {
    if (img.split == split) out.images.emplace(id, img);
  }
  return out;
}

std::vector<std::string> DatasetManifest::gallery(Split split) const {
  std::set<std::string> ids;
  for (const auto& e : entries) {
    if (e.split == split) ids.insert(e.image_id);
  }
  for (const auto& [id, img] : images) {
    if (img.split == split) ids.insert(id);
  }
  return {ids.begin(), ids.end()};
}

void DatasetManifest::validate() const {
  std::set<std::string> unique(categories.begin(), categories.end());
  require(unique.size() == categories.size(), ErrorCode::invalid_argument,
          "manifest: duplicate category names");
  std::set<std::string> train_categories, open_categories;
  std::map<std::string, Split> image_split;
  for (const auto& e : entries) {
    require(!e.text.empty(), ErrorCode::invalid_argument, "manifest: empty text in " + e.query_id);
    require(unique.contains(e.category), ErrorCode::invalid_argument,
            "manifest: unknown category in " + e.query_id);
    require(e.bbox.valid(), ErrorCode::invalid_argument, "manifest: invalid bbox in " + e.query_id);
    require(images.contains(e.image_id), ErrorCode::not_found,
            "manifest: unresolved image " + e.image_id);
    if (e.split == Split::train) train_categories.insert(e.category);
    if (e.split == Split::open_category) open_categories.insert(e.category);
    if (e.split != Split::open_category) {
      auto [it, inserted] = image_split.emplace(e.image_id, e.split);
      require(inserted || it->second == e.split, ErrorCode::invalid_argument,
              "manifest: image " + e.image_id + " appears in two splits");
    }
  }
  for (const auto& c : open_categories) {
    require(!train_categories.contains(c), ErrorCode::invalid_argument,
            "manifest: open-category class seen in train: " + c);
  }
}

// ---- rasterization ---------------------------------------------------------------

namespace {

class Canvas {
 public:
  explicit Canvas(GrayImage& image) : image_(image) {}

  void plot(long x, long y, double intensity) {
    if (intensity <= 0 || x < 0 || y < 0 || x >= image_.width || y >= image_.height) return;
    float& p = image_.at(static_cast<int>(y), static_cast<int>(x));
    p = std::max(p, static_cast<float>(std::min(intensity, 1.0)));
  }

  void splat(double x, double y) {
    const double fx = std::floor(x), fy = std::floor(y);
    const double ax = x - fx, ay = y - fy;
    const auto ix = static_cast<long>(fx), iy = static_cast<long>(fy);
    plot(ix, iy, (1 - ax) * (1 - ay));
    plot(ix + 1, iy, ax * (1 - ay));
    plot(ix, iy + 1, (1 - ax) * ay);
    plot(ix + 1, iy + 1, ax * ay);
  }

  // Xiaolin Wu anti-aliased line; pixel centers sit on integer coordinates.
  void line(double x0, double y0, double x1, double y1) {
    if (std::hypot(x1 - x0, y1 - y0) < 1e-9) {
      splat(x0, y0);
      return;
    }
    const bool steep = std::abs(y1 - y0) > std::abs(x1 - x0);
    if (steep) {
      std::swap(x0, y0);
      std::swap(x1, y1);
    }
    if (x0 > x1) {
      std::swap(x0, x1);
      std::swap(y0, y1);
    }
    auto put = [&](long major, long minor, double v) {
      steep ? plot(minor, major, v) : plot(major, minor, v);
    };
    auto fpart = [](double v) { return v - std::floor(v); };
    auto rfpart = [&](double v) { return 1.0 - fpart(v); };

    const double gradient = (x1 - x0) == 0 ? 1.0 : (y1 - y0) / (x1 - x0);

    double xend = std::floor(x0 + 0.5);
    double yend = y0 + gradient * (xend - x0);
    double xgap = rfpart(x0 + 0.5);
    const auto xpxl1 = static_cast<long>(xend);
    const auto ypxl1 = static_cast<long>(std::floor(yend));
    put(xpxl1, ypxl1, rfpart(yend) * xgap);
    put(xpxl1, ypxl1 + 1, fpart(yend) * xgap);
    double intery = yend + gradient;

    xend = std::floor(x1 + 0.5);
    yend = y1 + gradient * (xend - x1);
    xgap = fpart(x1 + 0.5);
    const auto xpxl2 = static_cast<long>(xend);
    const auto ypxl2 = static_cast<long>(std::floor(yend));
    put(xpxl2, ypxl2, rfpart(yend) * xgap);
    put(xpxl2, ypxl2 + 1, fpart(yend) * xgap);

    for (long x = xpxl1 + 1; x < xpxl2; ++x) {
      const auto base = static_cast<long>(std::floor(intery));
      put(x, base, rfpart(intery));
      put(x, base + 1, fpart(intery));
      intery += gradient;
    }
  }

 private:
  GrayImage& image_;
};

}  // namespace

SketchRaster rasterize_strokes(const std::vector<Polyline>& strokes, int canvas_size,
                               const std::string& category) {
  require(!strokes.empty(), ErrorCode::invalid_sketch, "rasterize: empty stroke list");
  require(canvas_size >= 32, ErrorCode::invalid_argument, "rasterize: canvas_size must be >= 32");
  double min_x = INFINITY, min_y = INFINITY, max_x = -INFINITY, max_y = -INFINITY;
  for (const auto& stroke : strokes) {
    require(stroke.size() >= 2, ErrorCode::invalid_sketch, "rasterize: polyline needs >= 2 points");
    for (const auto& p : stroke) {
      require(std::isfinite(p.x) && std::isfinite(p.y), ErrorCode::invalid_sketch,
              "rasterize: non-finite coordinate");
      min_x = std::min(min_x, p.x);
      max_x = std::max(max_x, p.x);
      min_y = std::min(min_y, p.y);
      max_y = std::max(max_y, p.y);
    }
  }
  const double span = canvas_size - 1.0;
  const double margin = 0.05 * span;
  const double usable = span - 2 * margin;
  const double extent = std::max(max_x - min_x, max_y - min_y);
  const double scale = extent > 0 ? usable / extent : 0.0;
  // Center the shorter axis inside the usable square.
  const double off_x = margin + (usable - (max_x - min_x) * scale) / 2;
  const double off_y = margin + (usable - (max_y - min_y) * scale) / 2;

  SketchRaster raster{GrayImage(canvas_size, canvas_size), category, SketchSource::stroke_rasterized};
  Canvas canvas(raster.pixels);
  for (const auto& stroke : strokes) {
    for (std::size_t i = 0; i + 1 < stroke.size(); ++i) {
      canvas.line(off_x + (stroke[i].x - min_x) * scale, off_y + (stroke[i].y - min_y) * scale,
                  off_x + (stroke[i + 1].x - min_x) * scale,
                  off_y + (stroke[i + 1].y - min_y) * scale);
    }
  }
  return raster;
}

StrokeRecord parse_stroke_record(const std::string& json_line) {
  json j;
  try {
    j = json::parse(json_line);
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt, std::string("stroke record: ") + e.what());
  }
  require(j.contains("drawing") && j["drawing"].is_array(), ErrorCode::corrupt,
          "stroke record: missing drawing");
  StrokeRecord rec;
  if (j.contains("word")) rec.word = j["word"].get<std::string>();
  if (j.contains("key_id")) {
    rec.key_id = j["key_id"].is_string() ? j["key_id"].get<std::string>() : j["key_id"].dump();
  }
  for (const auto& stroke : j["drawing"]) {
    require(stroke.is_array() && stroke.size() >= 2, ErrorCode::corrupt,
            "stroke record: malformed stroke");
    const auto& xs = stroke[0];
    const auto& ys = stroke[1];
    require(xs.size() == ys.size(), ErrorCode::corrupt, "stroke record: x/y length mismatch");
    Polyline line;
    for (std::size_t i = 0; i < xs.size(); ++i) line.push_back({xs[i].get<double>(), ys[i].get<double>()});
    // Single-point strokes are legal in the source data; render them as dots.
    if (line.size() == 1) line.push_back(line.front());
    if (!line.empty()) rec.drawing.push_back(std::move(line));
  }
  return rec;
}

std::vector<StrokeRecord> read_stroke_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io, "cannot read " + path.string());
  std::vector<StrokeRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_stroke_record(line));
  }
  return out;
}

// ---- building ---------------------------------------------------------------------

BuildResult build_manifest(const std::vector<Annotation>& annotations,
                           const std::map<std::string, std::vector<std::string>>& sketch_pool,
                           const SplitSpec& split_spec, std::uint64_t seed) {
  std::set<std::string> categories;
  for (const auto& a : annotations) {
    auto it = sketch_pool.find(a.object);
    if (it != sketch_pool.end() && !it->second.empty()) categories.insert(a.object);
  }
  require(!categories.empty(), ErrorCode::empty_intersection,
          "build_manifest: no annotation object matches a sketch category");

  BuildResult result;
  auto& manifest = result.manifest;
  manifest.categories.assign(categories.begin(), categories.end());

  std::mt19937_64 rng(seed);
  std::size_t index = 0;
  for (const auto& a : annotations) {
    if (!categories.contains(a.object)) {
      ++result.report.dropped;
      ++result.report.dropped_by_object[a.object];
      continue;
    }
    const auto& pool = sketch_pool.at(a.object);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);

    CompositeQuery q;
    std::ostringstream id;
    id << "q" << std::setw(7) << std::setfill('0') << index++;
    q.query_id = id.str();
    q.text = a.text;
    q.sketch_id = pool[pick(rng)];
    q.category = a.object;
    q.image_id = a.image_id;
    q.bbox = a.bbox;
    if (split_spec.open_categories.contains(a.object)) {
      q.split = Split::open_category;
    } else if (auto s = split_spec.image_split.find(a.image_id); s != split_spec.image_split.end()) {
      q.split = s->second;
    } else {
      q.split = split_spec.default_split;
    }
    require(q.bbox.valid(), ErrorCode::invalid_argument, "build_manifest: invalid bbox for " + a.image_id);
    require(!q.text.empty(), ErrorCode::invalid_argument, "build_manifest: empty text for " + a.image_id);

    auto [img, inserted] = manifest.images.try_emplace(
        a.image_id, ImageEntry{a.image_path.empty() ? "images/" + a.image_id + ".png" : a.image_path,
                               a.image_width, a.image_height, q.split});
    if (!inserted && img->second.split == Split::open_category && q.split != Split::open_category) {
      img->second.split = q.split;
    }
    manifest.entries.push_back(std::move(q));
    ++result.report.kept;
  }
  manifest.validate();
  return result;
}

DatasetStats compute_stats(const DatasetManifest& manifest, const Tokenizer& tokenizer) {
  require(!manifest.entries.empty(), ErrorCode::invalid_argument, "compute_stats: empty manifest");
  DatasetStats stats;
  std::set<std::string> images, sketches;
  double words = 0, tokens = 0, area = 0;
  for (const auto& e : manifest.entries) {
    std::istringstream in(e.text);
    std::string w;
    std::size_t n = 0;
    while (in >> w) ++n;
    words += static_cast<double>(n);
    tokens += static_cast<double>(tokenizer.encode_words(e.text).size());
    area += e.bbox.area();
    images.insert(e.image_id);
    sketches.insert(e.sketch_id);
  }
  for (const auto& [id, _] : manifest.images) images.insert(id);
  const auto n = static_cast<double>(manifest.entries.size());
  stats.avg_sentence_words = words / n;
  stats.avg_sentence_tokens = tokens / n;
  stats.avg_area_covered_pct = area / n * 100.0;
  stats.n_images = images.size();
  stats.n_sketches = sketches.size();
  stats.n_categories = manifest.categories.size();
  stats.n_queries = manifest.entries.size();
  return stats;
}

// ---- serialization ------------------------------------------------------------------

std::string serialize_manifest(const DatasetManifest& manifest) {
  json header;
  header["version"] = 1;
  header["categories"] = manifest.categories;
  json images = json::object();
  for (const auto& [id, img] : manifest.images) {
    images[id] = {{"path", img.path}, {"width", img.width}, {"height", img.height},
                  {"split", to_string(img.split)}};
  }
  header["images"] = images;
  std::string out = header.dump() + "\n";
  for (const auto& e : manifest.entries) {
    json line = {{"query_id", e.query_id}, {"text", e.text},          {"sketch", e.sketch_id},
                 {"category", e.category}, {"image_id", e.image_id},
                 {"bbox", {e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h}}, {"split", to_string(e.split)}};
    out += line.dump() + "\n";
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
  out << serialize_manifest(manifest);
}

DatasetManifest parse_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  DatasetManifest manifest;
  try {
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::corrupt, "manifest: empty file");
    auto header = json::parse(line);
    require(header.value("version", 0) == 1, ErrorCode::corrupt, "manifest: unsupported version");
    manifest.categories = header.at("categories").get<std::vector<std::string>>();
    if (header.contains("images")) {
      for (const auto& [id, img] : header["images"].items()) {
        manifest.images[id] = ImageEntry{img.at("path").get<std::string>(), img.value("width", 0),
                                         img.value("height", 0),
                                         parse_split(img.value("split", std::string("train")))};
      }
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto j = json::parse(line);
      CompositeQuery q;
      q.query_id = j.at("query_id").get<std::string>();
      q.text = j.at("text").get<std::string>();
      q.sketch_id = j.at("sketch").get<std::string>();
      q.category = j.at("category").get<std::string>();
      q.image_id = j.at("image_id").get<std::string>();
      auto b = j.at("bbox").get<std::vector<double>>();
      require(b.size() == 4, ErrorCode::corrupt, "manifest: bbox needs 4 values");
      q.bbox = {b[0], b[1], b[2], b[3]};
      q.split = parse_split(j.value("split", std::string("train")));
      if (!manifest.images.contains(q.image_id)) {
        manifest.images[q.image_id] = ImageEntry{"images/" + q.image_id + ".png", 0, 0, q.split};
      }
      manifest.entries.push_back(std::move(q));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt, std::string("manifest: ") + e.what());
  }
  manifest.validate();
  return manifest;
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str());
}

void write_corpus(const std::filesystem::path& root, const Corpus& corpus) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "sketches");
  write_manifest(root / "manifest.jsonl", corpus.manifest);
  for (const auto& [id, img] : corpus.images) {
    write_png(root / corpus.manifest.images.at(id).path, img);
  }
  for (const auto& [id, sk] : corpus.sketches) {
    write_png(root / "sketches" / (id + ".png"), sk.pixels);
  }
}

Corpus load_corpus(const std::filesystem::path& manifest_path) {
  Corpus corpus;
  corpus.manifest = read_manifest(manifest_path);
  const auto root = manifest_path.parent_path();
  for (const auto& [id, entry] : corpus.manifest.images) {
    corpus.images.emplace(id, read_rgb(root / entry.path));
  }
  for (const auto& e : corpus.manifest.entries) {
    if (corpus.sketches.contains(e.sketch_id)) continue;
    corpus.sketches.emplace(
        e.sketch_id,
        SketchRaster{read_gray(root / "sketches" / (e.sketch_id + ".png")), e.category, SketchSource::file});
  }
  return corpus;
}

// ---- batching ----------------------------------------------------------------------

namespace {

struct BatchFilter {
  std::set<std::string> images;
  std::set<std::pair<std::string, std::string>> queries;

  bool admit(const CompositeQuery& q) {
    if (images.contains(q.image_id) || queries.contains({q.text, q.category})) return false;
    images.insert(q.image_id);
    queries.insert({q.text, q.category});
    return true;
  }
};

}  // namespace

Batch sample_batch(const DatasetManifest& manifest, std::size_t batch_size, std::mt19937_64& rng) {
  require(batch_size >= 1, ErrorCode::invalid_argument, "sample_batch: batch_size must be >= 1");
  std::set<std::string> distinct;
  for (const auto& e : manifest.entries) distinct.insert(e.image_id);
  require(distinct.size() >= batch_size, ErrorCode::uniqueness,
          "sample_batch: fewer distinct images than batch_size");

  std::vector<std::size_t> order(manifest.entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  BatchFilter filter;
  Batch batch;
  for (auto i : order) {
    if (filter.admit(manifest.entries[i])) batch.push_back(i);
    if (batch.size() == batch_size) return batch;
  }
  fail(ErrorCode::uniqueness, "sample_batch: cannot assemble a batch of unique queries");
}

std::vector<Batch> plan_epoch(const DatasetManifest& manifest, std::size_t batch_size,
                              std::mt19937_64& rng) {
  require(batch_size >= 2, ErrorCode::invalid_argument, "plan_epoch: batch_size must be >= 2");
  std::vector<std::size_t> pending(manifest.entries.size());
  std::iota(pending.begin(), pending.end(), 0);
  std::shuffle(pending.begin(), pending.end(), rng);

  std::vector<Batch> batches;
  std::deque<std::size_t> deferred;
  std::size_t next = 0;
  while (next < pending.size() || !deferred.empty()) {
    BatchFilter filter;
    Batch batch;
    std::deque<std::size_t> conflicted;
    while (!deferred.empty() && batch.size() < batch_size) {
      const auto i = deferred.front();
      deferred.pop_front();
      if (filter.admit(manifest.entries[i])) {
        batch.push_back(i);
      } else {
        conflicted.push_back(i);
      }
    }
    while (next < pending.size() && batch.size() < batch_size) {
      const auto i = pending[next++];
      if (filter.admit(manifest.entries[i])) {
        batch.push_back(i);
      } else {
        conflicted.push_back(i);
      }
    }
    conflicted.insert(conflicted.end(), deferred.begin(), deferred.end());
    deferred = std::move(conflicted);
    if (batch.size() < 2) break;
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace cstbir
