#include "cstbir/baselines.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "cstbir/encoders.hpp"
#include "cstbir/error.hpp"
#include "log.hpp"

namespace cstbir {

namespace {

std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

bool mentions(const std::string& text, const std::string& phrase) {
  const auto hay = words_of(text);
  const auto needle = words_of(phrase);
  if (needle.empty() || needle.size() > hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

std::size_t whitespace_words(const std::string& text) {
  std::istringstream in(text);
  std::size_t n = 0;
  for (std::string w; in >> w;) ++n;
  return n;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

}  // namespace

void DescriptionTable::validate() const {
  for (const auto& [category, descriptions] : entries) {
    require(!descriptions.empty(), ErrorCode::invalid_argument, "description table: no entry for " + category);
    for (const auto& d : descriptions) {
      const auto n = whitespace_words(d);
      require(n >= 4 && n <= 10, ErrorCode::invalid_argument,
              "description table: '" + d + "' has " + std::to_string(n) + " words, expected 4-10");
      require(!mentions(d, category), ErrorCode::invalid_argument,
              "description table: '" + d + "' names its category " + category);
    }
  }
}

DescriptionTable DescriptionTable::parse(const std::string& text) {
  DescriptionTable table;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || trim(line)[0] == '#') continue;
    const auto tab = line.find('\t');
    require(tab != std::string::npos, ErrorCode::invalid_argument,
            "description table line " + std::to_string(line_no) + ": expected category<TAB>description");
    const auto category = trim(line.substr(0, tab));
    const auto description = trim(line.substr(tab + 1));
    require(!category.empty() && !description.empty(), ErrorCode::invalid_argument,
            "description table line " + std::to_string(line_no) + ": empty field");
    table.entries[category].push_back(description);
  }
  table.validate();
  return table;
}

DescriptionTable DescriptionTable::read(const std::filesystem::path& path) { return parse(file_bytes(path)); }

std::string DescriptionTable::serialize() const {
  std::string out;
  for (const auto& [category, descriptions] : entries) {
    for (const auto& d : descriptions) out += category + "\t" + d + "\n";
  }
  return out;
}

TrainedHeadClassifier::TrainedHeadClassifier(LoadedClassifier classifier) : classifier_(std::move(classifier)) {
  require(!classifier_.categories.empty(), ErrorCode::invalid_argument, "classifier: empty category universe");
  classifier_.model->eval();
}

Classification TrainedHeadClassifier::classify(const GrayImage& sketch) {
  torch::NoGradGuard guard;
  auto logits = classifier_.model->forward(fitted_sketch_tensor(sketch, classifier_.config.image_size));
  auto probs = torch::softmax(logits, 1)[0];
  const auto best = probs.argmax().item<std::int64_t>();
  return {classifier_.categories[static_cast<std::size_t>(best)], probs[best].item<double>()};
}

NearestClassMeanClassifier::NearestClassMeanClassifier(SketchEmbedder embedder, int image_size,
                                                       const std::vector<SketchRaster>& exemplars)
    : embedder_(std::move(embedder)), image_size_(image_size) {
  std::map<std::string, std::vector<const SketchRaster*>> by_category;
  for (const auto& s : exemplars) by_category[s.category].push_back(&s);
  require(!by_category.empty(), ErrorCode::invalid_argument, "classifier: empty category universe");
  torch::NoGradGuard guard;
  namespace F = torch::nn::functional;
  std::vector<torch::Tensor> means;
  for (const auto& [category, sketches] : by_category) {
    std::vector<torch::Tensor> rasters;
    for (const auto* s : sketches) rasters.push_back(fitted_sketch_tensor(s->pixels, image_size_));
    auto emb = F::normalize(embedder_(torch::cat(rasters)), F::NormalizeFuncOptions().dim(1));
    means.push_back(emb.mean(0));
    categories_.push_back(category);
  }
  means_ = F::normalize(torch::stack(means), F::NormalizeFuncOptions().dim(1));
}

Classification NearestClassMeanClassifier::classify(const GrayImage& sketch) {
  torch::NoGradGuard guard;
  namespace F = torch::nn::functional;
  auto emb = F::normalize(embedder_(fitted_sketch_tensor(sketch, image_size_)), F::NormalizeFuncOptions().dim(1))[0];
  auto sims = means_.matmul(emb);
  auto probs = torch::softmax(sims, 0);
  const auto best = sims.argmax().item<std::int64_t>();
  return {categories_[static_cast<std::size_t>(best)], probs[best].item<double>()};
}

FixedClassifier::FixedClassifier(std::string category) : universe_{std::move(category)} {
  require(!universe_[0].empty(), ErrorCode::invalid_argument, "classifier: empty category");
}

std::string to_string(CompletionMode mode) { return mode == CompletionMode::name ? "name" : "description"; }

CompletionMode parse_completion_mode(const std::string& name) {
  if (name == "name") return CompletionMode::name;
  if (name == "description" || name == "desc") return CompletionMode::description;
  fail(ErrorCode::invalid_argument, "unknown completion mode: " + name);
}

std::string complete_text(const std::string& text, const std::string& category, CompletionMode mode,
                          const DescriptionTable* table, std::mt19937_64& rng) {
  std::string prefix;
  if (mode == CompletionMode::name) {
    prefix = category;
    if (mentions(text, category)) {
      detail::log_warning("complete_text: '" + text + "' already contains '" + category + "'; inserting anyway");
    }
  } else {
    require(table != nullptr, ErrorCode::invalid_argument, "complete_text: description mode needs a table");
    auto it = table->entries.find(category);
    require(it != table->entries.end() && !it->second.empty(), ErrorCode::not_found,
            "complete_text: no description for category " + category);
    std::uniform_int_distribution<std::size_t> pick(0, it->second.size() - 1);
    prefix = it->second[pick(rng)];
  }
  return text.empty() ? prefix : prefix + " " + text;
}

QueryBatch encode_text_queries(LoadedModel& model, const std::vector<std::string>& texts) {
  require(!texts.empty(), ErrorCode::invalid_argument, "encode_text_queries: no queries");
  const auto len = static_cast<std::size_t>(model.model->config().max_text_len);
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> ids;
  for (const auto& text : texts) ids.push_back(ids_to_tensor(model.tokenizer.tokenize(text, len)));
  return {model.model->text_embedding(torch::cat(ids)), torch::Tensor()};
}

RankedResults two_stage_search(const GalleryIndex& index, LoadedModel& text_model, const TwoStageQuery& query,
                               SketchCategoryClassifier& classifier, CompletionMode mode,
                               const DescriptionTable* table, std::mt19937_64& rng, std::size_t k) {
  require(query.sketch != nullptr, ErrorCode::invalid_argument, "two-stage search needs a sketch");
  const auto predicted = classifier.classify(*query.sketch);
  const auto text = complete_text(query.text, predicted.category, mode, table, rng);
  const auto scores = score_gallery(index, encode_text_queries(text_model, {text}))[0].to(torch::kFloat64).contiguous();
  std::vector<double> row(scores.data_ptr<double>(), scores.data_ptr<double>() + scores.numel());
  auto out = rank_results(row, index.image_ids, k, query.target_image);
  out.query_id = query.query_id;
  return out;
}

MetricsReport evaluate_two_stage(LoadedModel& text_model, const Corpus& corpus, Split split,
                                 const ClassifierProvider& classifier_for, CompletionMode mode,
                                 const DescriptionTable* table, std::uint64_t seed,
                                 const std::vector<std::size_t>& ks) {
  const auto subset = corpus.manifest.filter(split);
  require(!subset.entries.empty(), ErrorCode::invalid_argument, "evaluate: split " + to_string(split) + " is empty");
  std::vector<std::pair<std::string, RgbImage>> gallery;
  for (const auto& id : corpus.manifest.gallery(split)) gallery.emplace_back(id, corpus.images.at(id));
  const auto index = build_index(gallery, text_model, IndexLayout::static_mean);
  std::mt19937_64 rng(seed);

  std::vector<std::pair<std::string, std::size_t>> ranks;
  for (const auto& q : subset.entries) {
    auto sk = corpus.sketches.find(q.sketch_id);
    require(sk != corpus.sketches.end(), ErrorCode::not_found, "evaluate: sketch " + q.sketch_id + " not loaded");
    TwoStageQuery query{q.query_id, q.text, &sk->second.pixels, q.image_id};
    const auto result = two_stage_search(index, text_model, query, classifier_for(q), mode, table, rng, 1);
    ranks.emplace_back(q.query_id, *result.gt_rank);
  }
  return report_from_ranks(to_string(split), index.size(), ranks, ks);
}

}  // namespace cstbir
