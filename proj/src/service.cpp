#include "cstbir/service.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

#include <httplib.h>

#include "cstbir/error.hpp"
#include "cstbir/image.hpp"
#include "log.hpp"

namespace cstbir {

using nlohmann::json;

std::string to_string(SearchMode mode) {
  switch (mode) {
    case SearchMode::stnet: return "stnet";
    case SearchMode::text_only: return "text_only";
    case SearchMode::sketch_only: return "sketch_only";
    case SearchMode::two_stage: return "two_stage";
  }
  return "stnet";
}

SearchMode parse_search_mode(const std::string& name) {
  if (name == "stnet") return SearchMode::stnet;
  if (name == "text_only") return SearchMode::text_only;
  if (name == "sketch_only") return SearchMode::sketch_only;
  if (name == "two_stage") return SearchMode::two_stage;
  throw ServiceError(400, "unknown mode: " + name);
}

void SearchRequest::validate() const {
  if (k < 1) throw ServiceError(400, "k must be >= 1");
  if (mode != SearchMode::text_only && sketch_png.empty()) {
    throw ServiceError(400, "sketch_png is required for mode " + to_string(mode));
  }
  if (mode != SearchMode::sketch_only && text.empty()) {
    throw ServiceError(400, "text is required for mode " + to_string(mode));
  }
}

SearchRequest parse_search_request(const json& body) {
  if (!body.is_object()) throw ServiceError(400, "request body must be a JSON object");
  SearchRequest request;
  try {
    request.sketch_png = body.value("sketch_png", std::string());
    request.text = body.value("text", std::string());
    request.k = body.value("k", std::int64_t{10});
    if (body.contains("mode")) request.mode = parse_search_mode(body.at("mode").get<std::string>());
  } catch (const json::exception& e) {
    throw ServiceError(400, std::string("bad request field: ") + e.what());
  }
  request.validate();
  return request;
}

namespace {

std::map<std::string, std::string> scan_thumbnails(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  if (dir.empty() || !std::filesystem::is_directory(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file()) out.emplace(entry.path().stem().string(), entry.path().filename().string());
  }
  return out;
}

GrayImage decode_sketch(const std::string& encoded) {
  GrayImage sketch;
  try {
    sketch = decode_gray(base64_decode(encoded));
  } catch (const std::exception& e) {
    throw ServiceError(400, std::string("undecodable sketch: ") + e.what());
  }
  // Canvas exports usually draw dark strokes on white; the model expects
  // bright strokes on a dark background.
  double mean = 0;
  for (float v : sketch.pixels) mean += v;
  mean /= static_cast<double>(std::max<std::size_t>(1, sketch.pixels.size()));
  if (mean > 0.5) {
    for (auto& v : sketch.pixels) v = 1.0f - v;
  }
  return sketch;
}

std::vector<double> row_of(const torch::Tensor& scores) {
  auto c = scores[0].to(torch::kFloat64).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

}  // namespace

std::shared_ptr<ServiceState> load_service_state(const ServiceConfig& config) {
  auto state = std::make_shared<ServiceState>();
  state->model = load_model(config.checkpoint);
  if (!config.index_path.empty() && std::filesystem::exists(config.index_path)) {
    state->index = read_index(config.index_path);
    require(state->index.model_fingerprint == state->model.fingerprint, ErrorCode::invalid_argument,
            "index " + config.index_path.string() + " was built with a different checkpoint");
  } else {
    require(!config.gallery_dir.empty(), ErrorCode::invalid_argument, "serve: need an index or a gallery directory");
    state->index = build_index(read_gallery_dir(config.gallery_dir), state->model, default_layout(state->model));
    if (!config.index_path.empty()) write_index(config.index_path, state->index);
  }
  if (!config.text_checkpoint.empty()) {
    state->text_model = load_model(config.text_checkpoint);
    require(!config.gallery_dir.empty(), ErrorCode::invalid_argument,
            "serve: a text checkpoint needs the gallery directory to index");
    state->text_index = build_index(read_gallery_dir(config.gallery_dir), *state->text_model,
                                    IndexLayout::static_mean);
  }
  if (!config.classifier_checkpoint.empty()) {
    state->classifier = std::make_unique<TrainedHeadClassifier>(load_classifier(config.classifier_checkpoint));
  }
  if (!config.description_table.empty()) state->descriptions = DescriptionTable::read(config.description_table);
  state->gallery_dir = config.gallery_dir;
  state->thumbnails = scan_thumbnails(config.gallery_dir);
  return state;
}

std::shared_ptr<const ServiceState> SearchService::snapshot() const {
  std::lock_guard lock(mutex_);
  return state_;
}

void SearchService::publish(std::shared_ptr<ServiceState> state) {
  std::lock_guard lock(mutex_);
  state_ = std::move(state);
}

json SearchService::handle_search(const SearchRequest& request) const {
  const auto start = std::chrono::steady_clock::now();
  request.validate();
  const auto state = snapshot();
  if (!state || state->index.size() == 0) throw ServiceError(503, "no index loaded");

  // Models are only read during inference; the const_cast lets the
  // forward-pass API take them by reference.
  auto& model = const_cast<LoadedModel&>(state->model);
  std::optional<GrayImage> sketch;
  if (!request.sketch_png.empty()) sketch = decode_sketch(request.sketch_png);

  const GalleryIndex* index = &state->index;
  std::vector<double> scores;
  try {
    switch (request.mode) {
      case SearchMode::stnet: {
        if (model.modality != Modality::sketch_text) {
          throw ServiceError(503, "stnet mode needs a sketch+text checkpoint");
        }
        scores = row_of(score_gallery(*index, encode_queries(model, {request.text}, {&*sketch})));
        break;
      }
      case SearchMode::text_only: {
        auto* text_model = state->text_model ? &const_cast<LoadedModel&>(*state->text_model) : &model;
        if (state->text_model) index = &*state->text_index;
        if (text_model->modality == Modality::sketch_only) {
          throw ServiceError(503, "text_only mode needs a model with a text encoder");
        }
        scores = row_of(score_gallery(*index, encode_text_queries(*text_model, {request.text})));
        break;
      }
      case SearchMode::sketch_only: {
        if (model.modality == Modality::text_only) {
          throw ServiceError(503, "sketch_only mode needs a model with a sketch encoder");
        }
        torch::NoGradGuard guard;
        const int size = model.model->config().image_size;
        auto emb = model.model->sketch_embedding(fitted_sketch_tensor(*sketch, size));
        scores = row_of(score_gallery(*index, QueryBatch{emb, torch::Tensor()}));
        break;
      }
      case SearchMode::two_stage: {
        if (!state->classifier) throw ServiceError(503, "two_stage mode needs a sketch classifier checkpoint");
        auto* text_model = state->text_model ? &const_cast<LoadedModel&>(*state->text_model) : &model;
        if (state->text_model) index = &*state->text_index;
        const auto predicted = state->classifier->classify(*sketch);
        // Fixed seed per request keeps identical requests identical.
        std::mt19937_64 rng(0);
        const auto mode = state->descriptions ? CompletionMode::description : CompletionMode::name;
        const auto text = complete_text(request.text, predicted.category, mode,
                                        state->descriptions ? &*state->descriptions : nullptr, rng);
        scores = row_of(score_gallery(*index, encode_text_queries(*text_model, {text})));
        break;
      }
    }
  } catch (const Error& e) {
    const int status = e.code() == ErrorCode::unavailable ? 503 : 400;
    throw ServiceError(status, e.what());
  }

  const auto n = index->size();
  const bool clamped = static_cast<std::size_t>(request.k) > n;
  const auto k = clamped ? n : static_cast<std::size_t>(request.k);
  const auto ranked = rank_results(scores, index->image_ids, k);

  json results = json::array();
  for (std::size_t r = 0; r < ranked.results.size(); ++r) {
    const auto& hit = ranked.results[r];
    auto thumb = state->thumbnails.find(hit.image_id);
    const auto file = thumb != state->thumbnails.end() ? thumb->second : hit.image_id + ".png";
    results.push_back(
        {{"image_id", hit.image_id}, {"score", hit.score}, {"rank", r + 1}, {"thumbnail_url", "/gallery/" + file}});
  }
  const double latency = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return {{"results", results}, {"clamped", clamped}, {"mode", to_string(request.mode)}, {"latency_ms", latency}};
}

json SearchService::health() const {
  const auto state = snapshot();
  if (!state) return {{"status", "no_index"}, {"index_size", 0}, {"model_fingerprint", ""}};
  return {{"status", "ok"}, {"index_size", state->index.size()}, {"model_fingerprint", state->model.fingerprint}};
}

json SearchService::categories() const {
  const auto state = snapshot();
  if (!state) throw ServiceError(503, "no model loaded");
  return {{"categories", state->model.categories}};
}

json SearchService::reindex(const ServiceConfig& config) {
  std::lock_guard writer(reindex_mutex_);
  std::shared_ptr<ServiceState> fresh;
  try {
    fresh = load_service_state(config);
  } catch (const Error& e) {
    throw ServiceError(400, std::string("reindex failed: ") + e.what());
  }
  publish(fresh);
  return health();
}

void register_routes(httplib::Server& server, SearchService& service, const ServiceConfig& base_config) {
  auto reply = [](httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  };
  auto guarded = [reply](auto&& fn) {
    return [fn, reply](const httplib::Request& req, httplib::Response& res) {
      try {
        reply(res, 200, fn(req));
      } catch (const ServiceError& e) {
        reply(res, e.status(), {{"error", e.what()}});
      } catch (const json::exception& e) {
        reply(res, 400, {{"error", std::string("malformed JSON: ") + e.what()}});
      } catch (const std::exception& e) {
        reply(res, 500, {{"error", e.what()}});
      }
    };
  };

  server.Post("/api/search", guarded([&service](const httplib::Request& req) {
                return service.handle_search(parse_search_request(json::parse(req.body)));
              }));
  server.Post("/api/index", guarded([&service, base_config](const httplib::Request& req) {
                const auto body = json::parse(req.body);
                ServiceConfig config = base_config;
                config.index_path.clear();
                if (body.contains("gallery_dir")) config.gallery_dir = body.at("gallery_dir").get<std::string>();
                if (body.contains("checkpoint")) config.checkpoint = body.at("checkpoint").get<std::string>();
                return service.reindex(config);
              }));
  server.Get("/api/health", guarded([&service](const httplib::Request&) { return service.health(); }));
  server.Get("/api/categories", guarded([&service](const httplib::Request&) { return service.categories(); }));
  server.Get(R"(/gallery/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
    const auto state = service.snapshot();
    const std::string name = req.matches[1];
    bool known = false;
    if (state) {
      for (const auto& [id, file] : state->thumbnails) known = known || file == name;
    }
    std::ifstream in(known ? state->gallery_dir / name : std::filesystem::path(), std::ios::binary);
    if (!known || !in) {
      res.status = 404;
      return;
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto ext = std::filesystem::path(name).extension().string();
    res.set_content(bytes, ext == ".png" ? "image/png" : "image/jpeg");
  });
}

}  // namespace cstbir
