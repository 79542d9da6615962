#include "cstbir/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "cstbir/encoders.hpp"
#include "cstbir/error.hpp"
#include "log.hpp"

namespace cstbir {

using nlohmann::json;

namespace {

constexpr char kIndexMagic[4] = {'C', 'S', 'T', 'B'};
constexpr std::uint32_t kIndexVersion = 1;
constexpr std::int64_t kEncodeBatch = 32;

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos) {
  require(pos + sizeof(T) <= in.size(), ErrorCode::corrupt, "index: truncated");
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

void put_floats(std::string& out, const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  out.append(static_cast<const char*>(c.data_ptr()), static_cast<std::size_t>(c.numel()) * sizeof(float));
}

torch::Tensor get_floats(const std::string& in, std::size_t& pos, std::vector<std::int64_t> shape) {
  auto t = torch::empty(shape, torch::kFloat32);
  const auto bytes = static_cast<std::size_t>(t.numel()) * sizeof(float);
  require(pos + bytes <= in.size(), ErrorCode::corrupt, "index: truncated payload");
  std::memcpy(t.data_ptr(), in.data() + pos, bytes);
  pos += bytes;
  return t;
}

std::vector<double> to_doubles(const torch::Tensor& row) {
  auto c = row.detach().to(torch::kFloat64).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

}  // namespace

std::string to_string(IndexLayout layout) { return layout == IndexLayout::attention ? "attention" : "static"; }

IndexLayout parse_layout(const std::string& name) {
  if (name == "attention") return IndexLayout::attention;
  if (name == "static") return IndexLayout::static_mean;
  fail(ErrorCode::invalid_argument, "unknown index layout: " + name);
}

IndexLayout default_layout(const LoadedModel& model) {
  return model.modality == Modality::sketch_text ? IndexLayout::attention : IndexLayout::static_mean;
}

GalleryIndex build_index(const std::vector<std::pair<std::string, RgbImage>>& images, LoadedModel& model,
                         IndexLayout layout) {
  std::set<std::string> seen;
  for (const auto& [id, image] : images) {
    require(seen.insert(id).second, ErrorCode::uniqueness, "build_index: duplicate image id " + id);
  }
  if (layout == IndexLayout::static_mean && model.modality == Modality::sketch_text) {
    detail::log_warning("static index for a sketch+text model: image pooling will ignore the query sketch");
  }
  const int s = model.model->config().image_size;
  torch::NoGradGuard guard;
  model.model->eval();

  std::vector<torch::Tensor> tokens;
  for (std::size_t start = 0; start < images.size(); start += kEncodeBatch) {
    const auto end = std::min(images.size(), start + static_cast<std::size_t>(kEncodeBatch));
    std::vector<torch::Tensor> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(image_to_tensor(images[i].second, s));
    tokens.push_back(model.model->image_tokens(torch::cat(batch)));
  }

  GalleryIndex index;
  index.layout = layout;
  index.model_fingerprint = model.fingerprint;
  for (const auto& [id, image] : images) index.image_ids.push_back(id);
  const int d = model.model->config().embed_dim;
  if (images.empty()) {
    index.embeddings = torch::empty({0, d});
    if (layout == IndexLayout::attention) index.tokens = torch::empty({0, model.model->config().patches() + 1, d});
    return index;
  }
  auto all = torch::cat(tokens);
  index.embeddings = torch::nn::functional::normalize(spatial_mean_pool(all),
                                                      torch::nn::functional::NormalizeFuncOptions().dim(1));
  if (layout == IndexLayout::attention) index.tokens = all;
  return index;
}

std::vector<std::pair<std::string, RgbImage>> read_gallery_dir(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorCode::not_found, "gallery directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (entry.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<std::pair<std::string, RgbImage>> out;
  for (const auto& f : files) out.emplace_back(f.stem().string(), read_rgb(f));
  return out;
}

std::string serialize_index(const GalleryIndex& index) {
  const auto n = static_cast<std::uint64_t>(index.size());
  const auto d = static_cast<std::uint64_t>(index.embeddings.size(1));
  const bool with_tokens = index.layout == IndexLayout::attention;
  require(!with_tokens || (index.tokens.defined() && index.tokens.size(0) == static_cast<std::int64_t>(n)),
          ErrorCode::shape_mismatch, "index: attention layout without token sets");
  std::string out(kIndexMagic, sizeof(kIndexMagic));
  put<std::uint32_t>(out, kIndexVersion);
  put<std::uint64_t>(out, n);
  put<std::uint64_t>(out, d);
  put<std::uint8_t>(out, with_tokens ? 1 : 0);
  put<std::uint64_t>(out, with_tokens ? static_cast<std::uint64_t>(index.tokens.size(1)) : 0);
  for (const auto& id : index.image_ids) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
    out += id;
  }
  put_floats(out, index.embeddings);
  if (with_tokens) put_floats(out, index.tokens);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(index.model_fingerprint.size()));
  out += index.model_fingerprint;
  const auto crc = crc32_hex(out);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(std::stoul(crc, nullptr, 16)));
  return out;
}

GalleryIndex parse_index(const std::string& bytes) {
  require(bytes.size() >= 33 && std::memcmp(bytes.data(), kIndexMagic, 4) == 0, ErrorCode::corrupt,
          "index: bad magic");
  std::size_t pos = bytes.size() - 4;
  const auto stored = get<std::uint32_t>(bytes, pos);
  require(stored == std::stoul(crc32_hex(bytes.substr(0, bytes.size() - 4)), nullptr, 16), ErrorCode::corrupt,
          "index: checksum mismatch");
  const std::string body = bytes.substr(0, bytes.size() - 4);
  pos = 4;
  require(get<std::uint32_t>(body, pos) == kIndexVersion, ErrorCode::corrupt, "index: unsupported version");
  const auto n = static_cast<std::int64_t>(get<std::uint64_t>(body, pos));
  const auto d = static_cast<std::int64_t>(get<std::uint64_t>(body, pos));
  const auto flag = get<std::uint8_t>(body, pos);
  const auto l = static_cast<std::int64_t>(get<std::uint64_t>(body, pos));
  require(flag <= 1, ErrorCode::corrupt, "index: bad layout flag");

  GalleryIndex index;
  index.layout = flag ? IndexLayout::attention : IndexLayout::static_mean;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto len = get<std::uint32_t>(body, pos);
    require(pos + len <= body.size(), ErrorCode::corrupt, "index: truncated id table");
    index.image_ids.push_back(body.substr(pos, len));
    pos += len;
  }
  index.embeddings = get_floats(body, pos, {n, d});
  if (flag) index.tokens = get_floats(body, pos, {n, l, d});
  const auto flen = get<std::uint32_t>(body, pos);
  require(pos + flen == body.size(), ErrorCode::corrupt, "index: trailing bytes");
  index.model_fingerprint = body.substr(pos, flen);
  return index;
}

void write_index(const std::filesystem::path& path, const GalleryIndex& index) {
  const auto bytes = serialize_index(index);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

GalleryIndex read_index(const std::filesystem::path& path) { return parse_index(file_bytes(path)); }

QueryBatch encode_queries(LoadedModel& model, const std::vector<std::string>& texts,
                          const std::vector<const GrayImage*>& sketches) {
  const auto& cfg = model.model->config();
  const bool need_text = model.modality != Modality::sketch_only;
  const bool need_sketch = model.modality != Modality::text_only;
  const auto q = std::max(texts.size(), sketches.size());
  require(q > 0, ErrorCode::invalid_argument, "encode_queries: no queries");
  torch::NoGradGuard guard;

  QueryBatch out;
  torch::Tensor h_text, h_sketch;
  if (need_text) {
    require(texts.size() == q, ErrorCode::shape_mismatch, "encode_queries: text count mismatch");
    std::vector<torch::Tensor> ids;
    for (const auto& text : texts) {
      ids.push_back(ids_to_tensor(model.tokenizer.tokenize(text, static_cast<std::size_t>(cfg.max_text_len))));
    }
    h_text = model.model->text_embedding(torch::cat(ids));
  }
  if (need_sketch) {
    require(sketches.size() == q, ErrorCode::shape_mismatch, "encode_queries: sketch count mismatch");
    std::vector<torch::Tensor> rasters;
    for (const auto* sketch : sketches) {
      require(sketch != nullptr, ErrorCode::invalid_argument, "a sketch is required for this model");
      rasters.push_back(fitted_sketch_tensor(*sketch, cfg.image_size));
    }
    h_sketch = model.model->sketch_embedding(torch::cat(rasters));
  }
  switch (model.modality) {
    case Modality::sketch_text:
      out.query = h_text;
      out.sketch = h_sketch;
      break;
    case Modality::text_only: out.query = h_text; break;
    case Modality::sketch_only: out.query = h_sketch; break;
  }
  return out;
}

torch::Tensor score_gallery(const GalleryIndex& index, const QueryBatch& q) {
  require(index.size() > 0, ErrorCode::invalid_argument, "search: empty index");
  torch::NoGradGuard guard;
  namespace F = torch::nn::functional;
  auto query = F::normalize(q.query, F::NormalizeFuncOptions().dim(1));
  torch::Tensor scores;
  if (q.sketch.defined() && index.tokens.defined()) {
    auto pooled = F::normalize(pairwise_attention_pool(index.tokens, q.sketch), F::NormalizeFuncOptions().dim(2));
    scores = torch::einsum("qnd,qd->qn", {pooled, query});
  } else {
    scores = query.matmul(index.embeddings.t());
  }
  require(torch::isfinite(scores).all().item<bool>(), ErrorCode::non_finite, "search: non-finite scores");
  return scores;
}

std::vector<std::size_t> rank_order(const std::vector<double>& scores, const std::vector<std::string>& ids) {
  require(scores.size() == ids.size(), ErrorCode::shape_mismatch, "rank_order: size mismatch");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  return order;
}

std::size_t rank_of(const std::vector<double>& scores, const std::vector<std::string>& ids, std::size_t target) {
  require(target < scores.size() && scores.size() == ids.size(), ErrorCode::out_of_range, "rank_of: bad target");
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > scores[target] || (scores[j] == scores[target] && ids[j] < ids[target])) ++rank;
  }
  return rank;
}

RankedResults rank_results(const std::vector<double>& scores, const std::vector<std::string>& ids, std::size_t k,
                           const std::optional<std::string>& target) {
  require(!ids.empty(), ErrorCode::invalid_argument, "search: empty index");
  require(k >= 1 && k <= ids.size(), ErrorCode::out_of_range,
          "search: k must be in [1, " + std::to_string(ids.size()) + "]");
  RankedResults out;
  const auto order = rank_order(scores, ids);
  for (std::size_t r = 0; r < k; ++r) out.results.push_back({ids[order[r]], scores[order[r]]});
  if (target) {
    auto it = std::find(ids.begin(), ids.end(), *target);
    require(it != ids.end(), ErrorCode::not_found, "target image " + *target + " is not in the gallery");
    out.gt_rank = rank_of(scores, ids, static_cast<std::size_t>(it - ids.begin()));
  }
  return out;
}

RankedResults search(const GalleryIndex& index, LoadedModel& model, const SearchQuery& query, std::size_t k) {
  require(index.size() > 0, ErrorCode::invalid_argument, "search: empty index");
  const auto encoded = encode_queries(model, {query.text}, {query.sketch});
  const auto scores = to_doubles(score_gallery(index, encoded)[0]);
  auto out = rank_results(scores, index.image_ids, k, query.target_image);
  out.query_id = query.query_id;
  return out;
}

double recall_at_k(const std::vector<std::size_t>& gt_ranks, std::size_t k) {
  require(!gt_ranks.empty(), ErrorCode::invalid_argument, "recall_at_k: empty rank list");
  std::size_t hits = 0;
  for (auto r : gt_ranks) {
    require(r >= 1, ErrorCode::invalid_argument, "recall_at_k: ranks are 1-based");
    if (r <= k) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(gt_ranks.size());
}

double median_rank(const std::vector<std::size_t>& gt_ranks) {
  require(!gt_ranks.empty(), ErrorCode::invalid_argument, "median_rank: empty rank list");
  auto sorted = gt_ranks;
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  if (n % 2 == 1) return static_cast<double>(sorted[n / 2]);
  return (static_cast<double>(sorted[n / 2 - 1]) + static_cast<double>(sorted[n / 2])) / 2.0;
}

json to_json(const MetricsReport& report) {
  json recall = json::object();
  for (const auto& [k, v] : report.recall_at) recall[std::to_string(k)] = v;
  json ranks = json::array();
  for (const auto& [id, r] : report.ranks) ranks.push_back({{"query_id", id}, {"gt_rank", r}});
  return {{"split", report.split},     {"n_queries", report.n_queries}, {"gallery_size", report.gallery_size},
          {"recall_at", recall},       {"median_rank", report.median_rank}, {"ranks", ranks}};
}

MetricsReport report_from_ranks(const std::string& split, std::size_t gallery_size,
                                const std::vector<std::pair<std::string, std::size_t>>& ranks,
                                const std::vector<std::size_t>& ks) {
  MetricsReport report;
  report.split = split;
  report.gallery_size = gallery_size;
  report.n_queries = ranks.size();
  report.ranks = ranks;
  std::vector<std::size_t> values;
  for (const auto& [id, r] : ranks) values.push_back(r);
  for (auto k : ks) report.recall_at[k] = recall_at_k(values, k);
  report.median_rank = median_rank(values);
  return report;
}

MetricsReport evaluate(LoadedModel& model, const Corpus& corpus, Split split, const std::vector<std::size_t>& ks,
                       std::optional<IndexLayout> layout) {
  require(!ks.empty(), ErrorCode::invalid_argument, "evaluate: no K values");
  const auto subset = corpus.manifest.filter(split);
  require(!subset.entries.empty(), ErrorCode::invalid_argument, "evaluate: split " + to_string(split) + " is empty");

  std::vector<std::pair<std::string, RgbImage>> gallery;
  for (const auto& id : corpus.manifest.gallery(split)) {
    auto it = corpus.images.find(id);
    require(it != corpus.images.end(), ErrorCode::not_found, "evaluate: image " + id + " not loaded");
    gallery.emplace_back(id, it->second);
  }
  const auto index = build_index(gallery, model, layout.value_or(default_layout(model)));
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < index.image_ids.size(); ++i) position[index.image_ids[i]] = i;

  std::vector<std::pair<std::string, std::size_t>> ranks;
  const auto& entries = subset.entries;
  for (std::size_t start = 0; start < entries.size(); start += kEncodeBatch) {
    const auto end = std::min(entries.size(), start + static_cast<std::size_t>(kEncodeBatch));
    std::vector<std::string> texts;
    std::vector<const GrayImage*> sketches;
    for (std::size_t i = start; i < end; ++i) {
      texts.push_back(entries[i].text);
      auto sk = corpus.sketches.find(entries[i].sketch_id);
      require(sk != corpus.sketches.end(), ErrorCode::not_found,
              "evaluate: sketch " + entries[i].sketch_id + " not loaded");
      sketches.push_back(&sk->second.pixels);
    }
    const auto scores = score_gallery(index, encode_queries(model, texts, sketches));
    for (std::size_t i = start; i < end; ++i) {
      auto pos = position.find(entries[i].image_id);
      require(pos != position.end(), ErrorCode::not_found,
              "evaluate: target image " + entries[i].image_id + " of " + entries[i].query_id + " not in gallery");
      const auto row = to_doubles(scores[static_cast<std::int64_t>(i - start)]);
      ranks.emplace_back(entries[i].query_id, rank_of(row, index.image_ids, pos->second));
    }
  }
  return report_from_ranks(to_string(split), index.size(), ranks, ks);
}

}  // namespace cstbir
