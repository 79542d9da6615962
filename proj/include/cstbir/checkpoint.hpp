#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "cstbir/config.hpp"
#include "cstbir/encoders.hpp"
#include "cstbir/stnet.hpp"
#include "cstbir/tokenizer.hpp"

namespace cstbir {

// Self-describing container:
//   "CSTBCKPT" | u32 version | u64 header length | header JSON |
//   raw little-endian tensor payloads | u32 CRC-32 of all preceding bytes.
// The header echoes `meta` and lists every tensor's name, dtype, shape and
// payload offset.
struct NamedTensor {
  std::string name;
  torch::Tensor value;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::string crc32_hex(const std::string& bytes);
std::string file_bytes(const std::filesystem::path& path);

// Parameters and buffers in registration order.
Checkpoint capture(const torch::nn::Module& module, nlohmann::json meta = nlohmann::json::object());
// Copies every tensor of `module` from `checkpoint`; names and shapes must
// match exactly. With `prefix`, checkpoint names are looked up as prefix+name.
void restore(torch::nn::Module& module, const Checkpoint& checkpoint, const std::string& prefix = {});

// A trained STNet with everything needed to embed raw queries.
struct LoadedModel {
  STNet model{nullptr};
  Tokenizer tokenizer;
  Modality modality = Modality::sketch_text;
  std::vector<std::string> categories;
  std::string fingerprint;
};

std::string save_model(const std::filesystem::path& path, const LoadedModel& model);
LoadedModel load_model(const std::filesystem::path& path);
// In-memory round trip; sets `fingerprint` from the serialized bytes.
std::string model_bytes(const LoadedModel& model);
LoadedModel model_from_bytes(const std::string& bytes);

struct LoadedClassifier {
  SketchClassifier model{nullptr};
  ModelConfig config;
  std::vector<std::string> categories;
};

void save_classifier(const std::filesystem::path& path, const LoadedClassifier& classifier);
LoadedClassifier load_classifier(const std::filesystem::path& path);

// Loads any configured `pretrained` component weights into `model`.
void apply_pretrained(STNet& model);

}  // namespace cstbir
