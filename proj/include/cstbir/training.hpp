#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cstbir/checkpoint.hpp"
#include "cstbir/config.hpp"
#include "cstbir/dataset.hpp"
#include "cstbir/tokenizer.hpp"

namespace cstbir {

struct TrainRunConfig {
  ModelConfig model;
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 3e-4;
  double grad_clip = 1.0;  // global gradient-norm clip; <= 0 disables
  double weight_decay = 0.0;  // decoupled (AdamW) weight decay
  std::uint64_t seed = 0;
  std::set<LossKind> enabled_losses = all_losses();
  Modality modality = Modality::sketch_text;
  // Empty: nothing is written to disk.
  std::filesystem::path checkpoint_dir;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainRunConfig& c);
void from_json(const nlohmann::json& j, TrainRunConfig& c);
TrainRunConfig read_run_config(const std::filesystem::path& path);
void write_run_config(const std::filesystem::path& path, const TrainRunConfig& config);

// Applies the modality and loss set of ablation model `model_id` (1..7) to `base`.
TrainRunConfig ablation_config(int model_id, TrainRunConfig base = {});

struct EpochMetrics {
  int epoch = 0;
  std::size_t batches = 0;
  std::size_t queries = 0;
  std::map<std::string, double> mean_loss;  // per component plus "total"
  double temperature = 0;
  double seconds = 0;  // wall time; kept out of the log file
};

nlohmann::json to_json(const EpochMetrics& metrics);

struct TrainResult {
  LoadedModel model;
  std::vector<EpochMetrics> history;
  std::filesystem::path final_checkpoint;  // empty when checkpoint_dir is empty
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Trains on the train split of `corpus`. With a checkpoint_dir, writes
// run_config.json, metrics.jsonl (one line per epoch), epoch_NNN.ckpt after
// every epoch and final.ckpt.
TrainResult train(const TrainRunConfig& run, const Corpus& corpus, const Tokenizer& tokenizer,
                  const EpochCallback& on_epoch = {});

// Learns the BPE vocabulary from the train-split texts of `manifest`.
Tokenizer train_tokenizer(const DatasetManifest& manifest, std::size_t vocab_size);

}  // namespace cstbir
