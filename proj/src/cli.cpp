#include "cstbir/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <httplib.h>

#include "cstbir/baselines.hpp"
#include "cstbir/dataset.hpp"
#include "cstbir/error.hpp"
#include "cstbir/retrieval.hpp"
#include "cstbir/service.hpp"
#include "cstbir/tokenizer.hpp"
#include "cstbir/training.hpp"

namespace cstbir {

using nlohmann::json;

namespace {

constexpr const char* kUsage =
    "usage: cstbir <command> [options]\n"
    "\n"
    "commands:\n"
    "  gen-synthetic    render a synthetic sketch+text corpus\n"
    "  build-dataset    assemble a manifest from annotations and Quick, Draw! strokes\n"
    "  stats            dataset statistics of a manifest\n"
    "  pretrain-sketch  train the sketch classifier\n"
    "  train            train STNet (or an ablation variant)\n"
    "  evaluate         Recall@K / median rank on a split\n"
    "  index            build a gallery index file\n"
    "  serve            run the HTTP search service\n"
    "\n"
    "run 'cstbir <command> --help' for options\n";

std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    try {
      std::size_t used = 0;
      const auto k = std::stoul(item, &used);
      require(used == item.size() && k >= 1, ErrorCode::invalid_argument, "bad K value: " + item);
      ks.push_back(k);
    } catch (const std::logic_error&) {
      fail(ErrorCode::invalid_argument, "bad K value: " + item);
    }
  }
  require(!ks.empty(), ErrorCode::invalid_argument, "--k needs at least one value");
  return ks;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_json(const std::filesystem::path& path, const json& value) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
  out << value.dump(2) << "\n";
}

// ---- gen-synthetic --------------------------------------------------------------

int gen_synthetic(const SyntheticConfig& config, const std::filesystem::path& out) {
  const auto corpus = generate_synthetic(config);
  write_corpus(out, corpus);
  std::cout << json{{"manifest", (out / "manifest.jsonl").string()},
                    {"queries", corpus.manifest.entries.size()},
                    {"images", corpus.images.size()},
                    {"categories", corpus.manifest.categories}}
                   .dump()
            << "\n";
  return 0;
}

// ---- build-dataset --------------------------------------------------------------

struct BuildOptions {
  std::filesystem::path annotations;
  std::filesystem::path quickdraw;
  std::filesystem::path out;
  std::uint64_t seed = 0;
  int canvas = 224;
  int per_category = 100;
  std::string open_categories;
};

std::vector<Annotation> read_annotations(const std::filesystem::path& path, SplitSpec& spec) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io, "cannot read " + path.string());
  std::vector<Annotation> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      Annotation a;
      a.image_id = j.at("image_id").get<std::string>();
      a.text = j.at("text").get<std::string>();
      a.object = j.at("object").get<std::string>();
      a.image_width = j.at("image_width").get<int>();
      a.image_height = j.at("image_height").get<int>();
      a.image_path = j.value("image_path", std::string());
      const auto box = j.at("bbox").get<std::vector<double>>();  // pixels: x, y, w, h
      require(box.size() == 4 && a.image_width > 0 && a.image_height > 0, ErrorCode::invalid_argument,
              "bbox must be [x, y, w, h] with positive image size");
      a.bbox = {box[0] / a.image_width, box[1] / a.image_height, box[2] / a.image_width, box[3] / a.image_height};
      if (j.contains("split")) spec.image_split[a.image_id] = parse_split(j.at("split").get<std::string>());
      out.push_back(std::move(a));
    } catch (const json::exception& e) {
      fail(ErrorCode::invalid_argument, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

int build_dataset(const BuildOptions& o) {
  SplitSpec spec;
  for (const auto& c : split_list(o.open_categories)) spec.open_categories.insert(c);
  const auto annotations = read_annotations(o.annotations, spec);

  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(o.quickdraw)) {
    if (entry.path().extension() == ".ndjson") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::map<std::string, std::vector<std::string>> pool;
  std::filesystem::create_directories(o.out / "sketches");
  for (const auto& file : files) {
    int taken = 0;
    for (const auto& record : read_stroke_file(file)) {
      if (taken >= o.per_category) break;
      const auto raster = rasterize_strokes(record.drawing, o.canvas, record.word);
      const auto id = "qd" + record.key_id;
      write_png(o.out / "sketches" / (id + ".png"), raster.pixels);
      pool[record.word].push_back(id);
      ++taken;
    }
  }
  const auto result = build_manifest(annotations, pool, spec, o.seed);
  write_manifest(o.out / "manifest.jsonl", result.manifest);
  std::cout << json{{"kept", result.report.kept},
                    {"dropped", result.report.dropped},
                    {"categories", result.manifest.categories.size()},
                    {"manifest", (o.out / "manifest.jsonl").string()}}
                   .dump()
            << "\n";
  return 0;
}

// ---- stats ----------------------------------------------------------------------

int stats(const std::filesystem::path& manifest_path, const std::filesystem::path& tokenizer_path, int vocab) {
  const auto manifest = read_manifest(manifest_path);
  const auto tokenizer = tokenizer_path.empty() ? train_tokenizer(manifest, static_cast<std::size_t>(vocab))
                                                : Tokenizer::load(tokenizer_path);
  const auto s = compute_stats(manifest, tokenizer);
  std::cout << json{{"avg_sentence_words", s.avg_sentence_words},
                    {"avg_sentence_tokens", s.avg_sentence_tokens},
                    {"avg_area_covered_pct", s.avg_area_covered_pct},
                    {"n_images", s.n_images},
                    {"n_sketches", s.n_sketches},
                    {"n_categories", s.n_categories},
                    {"n_queries", s.n_queries}}
                   .dump(2)
            << "\n";
  return 0;
}

// ---- pretrain-sketch ------------------------------------------------------------

int pretrain_sketch(const std::filesystem::path& manifest_path, const std::filesystem::path& out,
                    const std::filesystem::path& config_path, const PretrainConfig& options) {
  const auto corpus = load_corpus(manifest_path);
  ModelConfig config;
  if (!config_path.empty()) config = read_run_config(config_path).model;
  std::vector<SketchRaster> sketches;
  std::set<std::string> seen;
  for (const auto& q : corpus.manifest.entries) {
    if (q.split != Split::train || !seen.insert(q.sketch_id).second) continue;
    sketches.push_back(corpus.sketches.at(q.sketch_id));
  }
  const auto result = pretrain_sketch_classifier(sketches, config, options);
  for (const auto& e : result.history) {
    std::cout << json{{"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}}.dump() << "\n";
  }
  save_classifier(out, {result.model, config, result.categories});
  return 0;
}

// ---- train ----------------------------------------------------------------------

struct TrainOptions {
  std::filesystem::path manifest;
  std::filesystem::path out;
  std::filesystem::path config;
  std::filesystem::path tokenizer;
  int ablation = 0;
  std::optional<int> epochs, batch_size, image_size, patch_size, embed_dim;
  std::optional<double> learning_rate;
  std::optional<std::uint64_t> seed;
};

int train_command(const TrainOptions& o) {
  TrainRunConfig run;
  if (!o.config.empty()) run = read_run_config(o.config);
  if (o.ablation != 0) run = ablation_config(o.ablation, run);
  if (o.epochs) run.epochs = *o.epochs;
  if (o.batch_size) run.batch_size = *o.batch_size;
  if (o.learning_rate) run.learning_rate = *o.learning_rate;
  if (o.seed) run.seed = *o.seed;
  if (o.image_size) run.model.image_size = *o.image_size;
  if (o.patch_size) run.model.patch_size = *o.patch_size;
  if (o.embed_dim) run.model.embed_dim = *o.embed_dim;
  run.checkpoint_dir = o.out;

  const auto corpus = load_corpus(o.manifest);
  run.model.n_categories = static_cast<int>(corpus.manifest.categories.size());
  const auto tokenizer = o.tokenizer.empty()
                             ? train_tokenizer(corpus.manifest, static_cast<std::size_t>(run.model.vocab_size))
                             : Tokenizer::load(o.tokenizer);
  std::filesystem::create_directories(o.out);
  tokenizer.save(o.out / "tokenizer.bpe");
  const auto result = train(run, corpus, tokenizer, [](const EpochMetrics& m) {
    std::cout << to_json(m).dump() << "\n" << std::flush;
  });
  std::cout << json{{"checkpoint", result.final_checkpoint.string()}, {"fingerprint", result.model.fingerprint}}.dump()
            << "\n";
  return 0;
}

// ---- evaluate -------------------------------------------------------------------

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::filesystem::path out;
  std::string split = "test1k";
  std::string ks = "1,5,10";
  std::string layout;
  std::string two_stage;  // "", "name" or "description"
  std::string classifier = "oracle";
  std::filesystem::path descriptions;
  std::uint64_t seed = 0;
};

int evaluate_command(const EvalOptions& o) {
  auto model = load_model(o.checkpoint);
  const auto corpus = load_corpus(o.manifest);
  const auto split = parse_split(o.split);
  const auto ks = parse_ks(o.ks);
  MetricsReport report;
  if (o.two_stage.empty()) {
    std::optional<IndexLayout> layout;
    if (!o.layout.empty()) layout = parse_layout(o.layout);
    report = evaluate(model, corpus, split, ks, layout);
  } else {
    const auto mode = parse_completion_mode(o.two_stage);
    std::optional<DescriptionTable> table;
    if (!o.descriptions.empty()) table = DescriptionTable::read(o.descriptions);
    std::unique_ptr<SketchCategoryClassifier> shared;
    if (o.classifier != "oracle") shared = std::make_unique<TrainedHeadClassifier>(load_classifier(o.classifier));
    std::unique_ptr<FixedClassifier> oracle;
    ClassifierProvider provider = [&](const CompositeQuery& q) -> SketchCategoryClassifier& {
      if (shared) return *shared;
      oracle = std::make_unique<FixedClassifier>(q.category);
      return *oracle;
    };
    report = evaluate_two_stage(model, corpus, split, provider, mode, table ? &*table : nullptr, o.seed, ks);
  }
  const auto j = to_json(report);
  if (!o.out.empty()) write_json(o.out, j);
  json summary = j;
  summary.erase("ranks");
  std::cout << summary.dump() << "\n";
  return 0;
}

// ---- index / serve --------------------------------------------------------------

int index_command(const std::filesystem::path& checkpoint, const std::filesystem::path& gallery,
                  const std::filesystem::path& out, const std::string& layout_name) {
  auto model = load_model(checkpoint);
  const auto layout = layout_name.empty() ? default_layout(model) : parse_layout(layout_name);
  const auto index = build_index(read_gallery_dir(gallery), model, layout);
  write_index(out, index);
  std::cout << json{{"index", out.string()},
                    {"size", index.size()},
                    {"layout", to_string(index.layout)},
                    {"model_fingerprint", index.model_fingerprint}}
                   .dump()
            << "\n";
  return 0;
}

int serve_command(const ServiceConfig& config, const std::string& host, int port) {
  SearchService service(load_service_state(config));
  httplib::Server server;
  register_routes(server, service, config);
  std::cerr << "cstbir: serving " << service.health().dump() << " on http://" << host << ":" << port << "\n";
  require(server.listen(host, port), ErrorCode::io, "cannot listen on " + host + ":" + std::to_string(port));
  return 0;
}

int default_port() {
  if (const char* env = std::getenv("CSTBIR_PORT")) {
    try {
      return std::stoi(env);
    } catch (const std::logic_error&) {
      fail(ErrorCode::invalid_argument, std::string("CSTBIR_PORT is not a number: ") + env);
    }
  }
  return 8080;
}

}  // namespace

int run_cli(int argc, char** argv) {
  static const std::set<std::string> commands = {"gen-synthetic", "build-dataset", "pretrain-sketch", "train",
                                                 "evaluate",      "index",         "serve",           "stats"};
  if (argc < 2 || !commands.contains(argv[1])) {
    if (argc >= 2 && (std::string(argv[1]) == "--help" || std::string(argv[1]) == "-h")) {
      std::cout << kUsage;
      return 0;
    }
    if (argc >= 2) std::cerr << "error: unknown command '" << argv[1] << "'\n";
    std::cerr << kUsage;
    return 2;
  }

  CLI::App app{"Composite sketch+text image retrieval"};
  app.require_subcommand(1);

  SyntheticConfig synth;
  std::filesystem::path synth_out;
  auto* gen = app.add_subcommand("gen-synthetic", "render a synthetic corpus");
  gen->add_option("--out", synth_out, "output directory")->required();
  gen->add_option("--seed", synth.seed);
  gen->add_option("--categories", synth.n_categories);
  gen->add_option("--train", synth.n_train, "train queries");
  gen->add_option("--val", synth.n_val, "validation queries");
  gen->add_option("--gallery", synth.n_gallery, "test gallery images (one query each)");
  gen->add_option("--open-categories", synth.n_open_categories);
  gen->add_option("--open-queries", synth.n_open_queries);
  gen->add_option("--canvas", synth.canvas_size);
  gen->add_option("--queries-per-image", synth.queries_per_image);

  BuildOptions build;
  auto* bd = app.add_subcommand("build-dataset", "assemble a manifest");
  bd->add_option("--annotations", build.annotations, "JSON-lines region annotations")->required();
  bd->add_option("--quickdraw", build.quickdraw, "directory of Quick, Draw! .ndjson files")->required();
  bd->add_option("--out", build.out)->required();
  bd->add_option("--seed", build.seed);
  bd->add_option("--canvas", build.canvas);
  bd->add_option("--sketches-per-category", build.per_category);
  bd->add_option("--open-categories", build.open_categories, "comma-separated");

  std::filesystem::path stats_manifest, stats_tokenizer;
  int stats_vocab = 2000;
  auto* st = app.add_subcommand("stats", "dataset statistics");
  st->add_option("--manifest", stats_manifest)->required();
  st->add_option("--tokenizer", stats_tokenizer);
  st->add_option("--vocab", stats_vocab);

  std::filesystem::path pre_manifest, pre_out, pre_config;
  PretrainConfig pre;
  auto* ps = app.add_subcommand("pretrain-sketch", "train the sketch classifier");
  ps->add_option("--manifest", pre_manifest)->required();
  ps->add_option("--out", pre_out)->required();
  ps->add_option("--config", pre_config, "run config whose model section is used");
  ps->add_option("--epochs", pre.epochs);
  ps->add_option("--batch-size", pre.batch_size);
  ps->add_option("--lr", pre.learning_rate);
  ps->add_option("--seed", pre.seed);

  TrainOptions tr;
  auto* tc = app.add_subcommand("train", "train STNet");
  tc->add_option("--manifest", tr.manifest)->required();
  tc->add_option("--out", tr.out, "checkpoint directory")->required();
  tc->add_option("--config", tr.config, "JSON run config");
  tc->add_option("--tokenizer", tr.tokenizer);
  tc->add_option("--ablation", tr.ablation, "ablation model 1..7");
  tc->add_option("--epochs", tr.epochs);
  tc->add_option("--batch-size", tr.batch_size);
  tc->add_option("--lr", tr.learning_rate);
  tc->add_option("--seed", tr.seed);
  tc->add_option("--image-size", tr.image_size);
  tc->add_option("--patch-size", tr.patch_size);
  tc->add_option("--embed-dim", tr.embed_dim);

  EvalOptions ev;
  auto* ec = app.add_subcommand("evaluate", "Recall@K and median rank");
  ec->add_option("--checkpoint", ev.checkpoint)->required();
  ec->add_option("--manifest", ev.manifest)->required();
  ec->add_option("--split", ev.split);
  ec->add_option("--k", ev.ks, "comma-separated K list");
  ec->add_option("--out", ev.out, "report JSON with per-query ranks");
  ec->add_option("--layout", ev.layout, "attention or static");
  ec->add_option("--two-stage", ev.two_stage, "name or description");
  ec->add_option("--classifier", ev.classifier, "'oracle' or a sketch classifier checkpoint");
  ec->add_option("--descriptions", ev.descriptions);
  ec->add_option("--seed", ev.seed);

  std::filesystem::path ix_checkpoint, ix_gallery, ix_out;
  std::string ix_layout;
  auto* ic = app.add_subcommand("index", "build a gallery index");
  ic->add_option("--checkpoint", ix_checkpoint)->required();
  ic->add_option("--gallery-dir", ix_gallery)->required();
  ic->add_option("--out", ix_out)->required();
  ic->add_option("--layout", ix_layout, "attention or static");

  ServiceConfig service;
  std::string host = "127.0.0.1";
  std::optional<int> port;
  auto* sv = app.add_subcommand("serve", "HTTP search service");
  sv->add_option("--checkpoint", service.checkpoint)->required();
  sv->add_option("--index-path", service.index_path);
  sv->add_option("--gallery-dir", service.gallery_dir);
  sv->add_option("--text-checkpoint", service.text_checkpoint);
  sv->add_option("--classifier", service.classifier_checkpoint);
  sv->add_option("--descriptions", service.description_table);
  sv->add_option("--host", host);
  sv->add_option("--port", port, "default: $CSTBIR_PORT or 8080");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    torch::set_num_threads(1);
    if (*gen) return gen_synthetic(synth, synth_out);
    if (*bd) return build_dataset(build);
    if (*st) return stats(stats_manifest, stats_tokenizer, stats_vocab);
    if (*ps) return pretrain_sketch(pre_manifest, pre_out, pre_config, pre);
    if (*tc) return train_command(tr);
    if (*ec) return evaluate_command(ev);
    if (*ic) return index_command(ix_checkpoint, ix_gallery, ix_out, ix_layout);
    if (*sv) return serve_command(service, host, port.value_or(default_port()));
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace cstbir
