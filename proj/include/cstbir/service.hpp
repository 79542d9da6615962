#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cstbir/baselines.hpp"
#include "cstbir/checkpoint.hpp"
#include "cstbir/retrieval.hpp"

namespace httplib {
class Server;
}

namespace cstbir {

enum class SearchMode { stnet, text_only, sketch_only, two_stage };

std::string to_string(SearchMode mode);
SearchMode parse_search_mode(const std::string& name);

struct SearchRequest {
  std::string sketch_png;  // base64 (optionally a data: URL); strokes bright on dark
  std::string text;
  std::int64_t k = 10;
  SearchMode mode = SearchMode::stnet;

  // Rejects k < 1 and missing mode-dependent inputs.
  void validate() const;
};

SearchRequest parse_search_request(const nlohmann::json& body);

struct ServiceConfig {
  std::filesystem::path checkpoint;
  std::filesystem::path index_path;   // optional; built from gallery_dir when absent
  std::filesystem::path gallery_dir;  // thumbnails and (re)index source
  std::filesystem::path text_checkpoint;        // optional text-only model for text_only / two_stage
  std::filesystem::path classifier_checkpoint;  // optional sketch classifier for two_stage
  std::filesystem::path description_table;      // optional; switches two_stage to description insertion
};

// Errors raised while serving carry an HTTP status.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& message) : std::runtime_error(message), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

// Everything a request reads. Immutable once published.
struct ServiceState {
  LoadedModel model;
  GalleryIndex index;
  std::optional<LoadedModel> text_model;
  std::optional<GalleryIndex> text_index;
  std::unique_ptr<SketchCategoryClassifier> classifier;
  std::optional<DescriptionTable> descriptions;
  std::map<std::string, std::string> thumbnails;  // image id -> file name in gallery_dir
  std::filesystem::path gallery_dir;
};

std::shared_ptr<ServiceState> load_service_state(const ServiceConfig& config);

class SearchService {
 public:
  SearchService() = default;
  explicit SearchService(std::shared_ptr<ServiceState> state) : state_(std::move(state)) {}

  nlohmann::json handle_search(const SearchRequest& request) const;
  nlohmann::json health() const;
  nlohmann::json categories() const;
  // Builds a fresh state off to the side, then swaps it in; in-flight
  // requests finish against the state they started with.
  nlohmann::json reindex(const ServiceConfig& config);

  std::shared_ptr<const ServiceState> snapshot() const;
  void publish(std::shared_ptr<ServiceState> state);

 private:
  mutable std::mutex mutex_;
  std::shared_ptr<const ServiceState> state_;
  std::mutex reindex_mutex_;
};

// Registers /api/search, /api/index, /api/health, /api/categories and the
// static /gallery mount on `server`.
void register_routes(httplib::Server& server, SearchService& service, const ServiceConfig& base_config);

}  // namespace cstbir
