#include "cstbir/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include <torch/torch.h>

#include "cstbir/encoders.hpp"
#include "cstbir/error.hpp"
#include "cstbir/stnet.hpp"

namespace cstbir {

using nlohmann::json;

void TrainRunConfig::validate() const {
  model.validate();
  require(epochs >= 0, ErrorCode::invalid_argument, "train: epochs must be >= 0");
  require(batch_size >= 2, ErrorCode::invalid_argument, "train: batch_size must be >= 2");
  require(learning_rate > 0 && std::isfinite(learning_rate), ErrorCode::invalid_argument,
          "train: learning_rate must be positive");
  require(weight_decay >= 0, ErrorCode::invalid_argument, "train: weight_decay must be >= 0");
  require(enabled_losses.contains(LossKind::ct), ErrorCode::invalid_argument,
          "train: the contrastive loss must be enabled");
  if (modality != Modality::sketch_text) {
    require(enabled_losses.size() == 1, ErrorCode::invalid_argument,
            "train: single-modality runs support only CT");
  }
}

void to_json(json& j, const TrainRunConfig& c) {
  std::vector<std::string> losses;
  for (auto kind : c.enabled_losses) losses.push_back(to_string(kind));
  j = {{"model", c.model},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"grad_clip", c.grad_clip},
       {"weight_decay", c.weight_decay},
       {"seed", c.seed},
       {"enabled_losses", losses},
       {"modality", to_string(c.modality)},
       {"checkpoint_dir", c.checkpoint_dir.string()}};
}

void from_json(const json& j, TrainRunConfig& c) {
  c = TrainRunConfig{};
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  if (j.contains("enabled_losses")) {
    c.enabled_losses.clear();
    for (const auto& name : j.at("enabled_losses")) c.enabled_losses.insert(parse_loss(name.get<std::string>()));
  }
  if (j.contains("modality")) c.modality = parse_modality(j.at("modality").get<std::string>());
  c.checkpoint_dir = j.value("checkpoint_dir", std::string());
}

TrainRunConfig read_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io, "cannot read " + path.string());
  try {
    return json::parse(in).get<TrainRunConfig>();
  } catch (const json::exception& e) {
    fail(ErrorCode::invalid_argument, "run config " + path.string() + ": " + e.what());
  }
}

void write_run_config(const std::filesystem::path& path, const TrainRunConfig& config) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
  out << json(config).dump(2) << "\n";
}

TrainRunConfig ablation_config(int model_id, TrainRunConfig base) {
  using L = LossKind;
  base.modality = Modality::sketch_text;
  switch (model_id) {
    case 1:
      base.modality = Modality::sketch_only;
      base.enabled_losses = {L::ct};
      break;
    case 2:
      base.modality = Modality::text_only;
      base.enabled_losses = {L::ct};
      break;
    case 3: base.enabled_losses = {L::ct}; break;
    case 4: base.enabled_losses = {L::ct, L::od, L::sr}; break;
    case 5: base.enabled_losses = {L::ct, L::cls_t, L::cls_i, L::sr}; break;
    case 6: base.enabled_losses = {L::ct, L::cls_t, L::cls_i, L::od}; break;
    case 7: base.enabled_losses = all_losses(); break;
    default: fail(ErrorCode::out_of_range, "ablation model id must be in 1..7, got " + std::to_string(model_id));
  }
  return base;
}

json to_json(const EpochMetrics& metrics) {
  return {{"epoch", metrics.epoch},
          {"batches", metrics.batches},
          {"queries", metrics.queries},
          {"loss", metrics.mean_loss},
          {"temperature", metrics.temperature}};
}

Tokenizer train_tokenizer(const DatasetManifest& manifest, std::size_t vocab_size) {
  std::vector<std::string> texts;
  for (const auto& q : manifest.entries) {
    if (q.split == Split::train) texts.push_back(q.text);
  }
  return Tokenizer::train(texts, vocab_size);
}

namespace {

// Tensors for every train query, materialized once.
struct TrainTensors {
  torch::Tensor text_ids;   // [Q, L] int64
  torch::Tensor sketches;   // [Q, 1, S, S] float
  torch::Tensor images;     // [M, 3, S, S] uint8
  torch::Tensor image_row;  // [Q] int64 row into `images`
  torch::Tensor labels;     // [Q] int64
  std::vector<BoundingBox> boxes;
};

TrainTensors materialize(const DatasetManifest& train_set, const Corpus& corpus, const Tokenizer& tokenizer,
                         const ModelConfig& cfg) {
  const auto q = static_cast<std::int64_t>(train_set.entries.size());
  const int s = cfg.image_size;
  TrainTensors t;
  t.text_ids = torch::empty({q, cfg.max_text_len}, torch::kInt64);
  t.sketches = torch::empty({q, 1, s, s}, torch::kFloat32);
  t.image_row = torch::empty({q}, torch::kInt64);
  t.labels = torch::empty({q}, torch::kInt64);

  std::map<std::string, std::int64_t> rows;
  for (const auto& entry : train_set.entries) rows.emplace(entry.image_id, 0);
  std::int64_t next = 0;
  for (auto& [id, row] : rows) row = next++;
  t.images = torch::empty({next, 3, s, s}, torch::kUInt8);
  for (const auto& [id, row] : rows) {
    auto it = corpus.images.find(id);
    require(it != corpus.images.end(), ErrorCode::not_found, "train: image " + id + " not loaded");
    const auto rgb = resize(it->second, s, s);
    t.images[row].copy_(torch::from_blob(const_cast<std::uint8_t*>(rgb.data.data()), {s, s, 3}, torch::kUInt8)
                            .permute({2, 0, 1}));
  }

  for (std::int64_t i = 0; i < q; ++i) {
    const auto& entry = train_set.entries[static_cast<std::size_t>(i)];
    const auto ids = tokenizer.tokenize(entry.text, static_cast<std::size_t>(cfg.max_text_len));
    t.text_ids[i].copy_(torch::tensor(ids, torch::kInt64));
    auto sk = corpus.sketches.find(entry.sketch_id);
    require(sk != corpus.sketches.end(), ErrorCode::not_found, "train: sketch " + entry.sketch_id + " not loaded");
    t.sketches[i].copy_(fitted_sketch_tensor(sk->second.pixels, s)[0]);
    t.image_row[i] = rows.at(entry.image_id);
    t.labels[i] = static_cast<std::int64_t>(*train_set.category_index(entry.category));
    t.boxes.push_back(entry.bbox);
  }
  return t;
}

TrainingBatch gather(const TrainTensors& t, const Batch& batch) {
  std::vector<std::int64_t> idx(batch.begin(), batch.end());
  auto index = torch::tensor(idx, torch::kInt64);
  TrainingBatch out;
  out.text_ids = t.text_ids.index_select(0, index);
  out.sketches = t.sketches.index_select(0, index);
  out.images = t.images.index_select(0, t.image_row.index_select(0, index)).to(torch::kFloat32).div_(255.0);
  out.labels = t.labels.index_select(0, index);
  for (auto i : batch) out.boxes.push_back(t.boxes[i]);
  return out;
}

std::string epoch_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%03d.ckpt", epoch);
  return buf;
}

}  // namespace

TrainResult train(const TrainRunConfig& run, const Corpus& corpus, const Tokenizer& tokenizer,
                  const EpochCallback& on_epoch) {
  run.validate();
  const auto& cfg = run.model;
  require(tokenizer.vocab_size() <= static_cast<std::size_t>(cfg.vocab_size), ErrorCode::invalid_argument,
          "train: tokenizer vocabulary (" + std::to_string(tokenizer.vocab_size()) + ") exceeds model vocab_size");
  require(corpus.manifest.categories.size() == static_cast<std::size_t>(cfg.n_categories),
          ErrorCode::invalid_argument,
          "train: model n_categories (" + std::to_string(cfg.n_categories) + ") != manifest categories (" +
              std::to_string(corpus.manifest.categories.size()) + ")");
  auto train_set = corpus.manifest.filter(Split::train);
  require(train_set.entries.size() >= 2, ErrorCode::invalid_argument, "train: fewer than two train queries");

  torch::set_num_threads(1);
  torch::manual_seed(run.seed);
  STNet model(cfg);
  apply_pretrained(model);
  model->train();

  const auto tensors = materialize(train_set, corpus, tokenizer, cfg);
  torch::optim::AdamW optimizer(model->parameters(),
                               torch::optim::AdamWOptions(run.learning_rate).weight_decay(run.weight_decay));

  TrainResult result;
  result.model.model = model;
  result.model.tokenizer = tokenizer;
  result.model.modality = run.modality;
  result.model.categories = corpus.manifest.categories;

  const auto& dir = run.checkpoint_dir;
  std::ofstream log;
  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    write_run_config(dir / "run_config.json", run);
    log.open(dir / "metrics.jsonl", std::ios::trunc);
    require(static_cast<bool>(log), ErrorCode::io, "cannot write " + (dir / "metrics.jsonl").string());
  }

  for (int epoch = 1; epoch <= run.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::mt19937_64 rng(run.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch));
    const auto plan = plan_epoch(train_set, static_cast<std::size_t>(run.batch_size), rng);

    EpochMetrics metrics;
    metrics.epoch = epoch;
    std::map<std::string, double> sums;
    for (std::size_t b = 0; b < plan.size(); ++b) {
      const auto batch = gather(tensors, plan[b]);
      auto losses = compute_losses(model, batch, run.modality, run.enabled_losses);
      for (auto kind : all_losses()) {
        const double value = losses.component(kind).item<double>();
        if (!std::isfinite(value)) {
          fail(ErrorCode::non_finite, "train: non-finite L_" + to_string(kind) + " at epoch " +
                                          std::to_string(epoch) + " batch " + std::to_string(b));
        }
        sums[to_string(kind)] += value * static_cast<double>(plan[b].size());
      }
      const double total = losses.total.item<double>();
      require(std::isfinite(total), ErrorCode::non_finite,
              "train: non-finite total loss at epoch " + std::to_string(epoch));
      sums["total"] += total * static_cast<double>(plan[b].size());

      optimizer.zero_grad();
      losses.total.backward();
      if (run.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model->parameters(), run.grad_clip);
      optimizer.step();
      metrics.queries += plan[b].size();
    }
    metrics.batches = plan.size();
    for (const auto& [name, sum] : sums) {
      metrics.mean_loss[name] = metrics.queries ? sum / static_cast<double>(metrics.queries) : 0.0;
    }
    metrics.temperature = model->temperature().item<double>();
    metrics.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    if (!dir.empty()) {
      log << to_json(metrics).dump() << "\n";
      log.flush();
      model->eval();
      save_model(dir / epoch_name(epoch), result.model);
      model->train();
    }
    result.history.push_back(metrics);
    if (on_epoch) on_epoch(metrics);
  }

  model->eval();
  if (!dir.empty()) {
    result.final_checkpoint = dir / "final.ckpt";
    result.model.fingerprint = save_model(result.final_checkpoint, result.model);
  } else {
    result.model.fingerprint = crc32_hex(model_bytes(result.model));
  }
  return result;
}

}  // namespace cstbir
