#include "cstbir/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <zlib.h>

#include "cstbir/error.hpp"

namespace cstbir {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'C', 'S', 'T', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    default: fail(ErrorCode::invalid_argument, "checkpoint: unsupported tensor dtype");
  }
}

torch::ScalarType parse_dtype(const std::string& name) {
  if (name == "f32") return torch::kFloat32;
  if (name == "f64") return torch::kFloat64;
  if (name == "i64") return torch::kInt64;
  fail(ErrorCode::corrupt, "checkpoint: unknown dtype " + name);
}

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos) {
  require(pos + sizeof(T) <= in.size(), ErrorCode::corrupt, "checkpoint: truncated");
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

std::uint32_t crc(const char* data, std::size_t size) {
  uLong c = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < size) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size - done, 1u << 30));
    c = crc32(c, reinterpret_cast<const Bytef*>(data + done), chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace

std::string crc32_hex(const std::string& bytes) {
  std::ostringstream out;
  out << std::hex << std::setw(8) << std::setfill('0') << crc(bytes.data(), bytes.size());
  return out.str();
}

std::string file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  json header;
  header["meta"] = checkpoint.meta;
  json entries = json::array();
  std::string payload;
  for (const auto& [name, value] : checkpoint.tensors) {
    auto t = value.detach().to(torch::kCPU).contiguous();
    const auto bytes = static_cast<std::size_t>(t.numel()) * t.element_size();
    entries.push_back({{"name", name},
                       {"dtype", dtype_name(t.scalar_type())},
                       {"shape", t.sizes().vec()},
                       {"offset", payload.size()},
                       {"bytes", bytes}});
    payload.append(static_cast<const char*>(t.data_ptr()), bytes);
  }
  header["tensors"] = entries;
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += payload;
  put<std::uint32_t>(out, crc(out.data(), out.size()));
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  require(bytes.size() >= sizeof(kMagic) + 16 && std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) == 0,
          ErrorCode::corrupt, "checkpoint: bad magic");
  std::size_t tail = bytes.size() - 4;
  std::size_t pos = tail;
  const auto stored = get<std::uint32_t>(bytes, pos);
  require(stored == crc(bytes.data(), tail), ErrorCode::corrupt, "checkpoint: checksum mismatch");

  pos = sizeof(kMagic);
  require(get<std::uint32_t>(bytes, pos) == kVersion, ErrorCode::corrupt, "checkpoint: unsupported version");
  const auto header_len = get<std::uint64_t>(bytes, pos);
  require(pos + header_len <= tail, ErrorCode::corrupt, "checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(pos, header_len));
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt, std::string("checkpoint: ") + e.what());
  }
  const std::size_t data_start = pos + header_len;

  Checkpoint checkpoint;
  checkpoint.meta = header.value("meta", json::object());
  for (const auto& entry : header.at("tensors")) {
    const auto dtype = parse_dtype(entry.at("dtype").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto size = entry.at("bytes").get<std::size_t>();
    require(data_start + offset + size <= tail, ErrorCode::corrupt, "checkpoint: tensor payload out of range");
    auto t = torch::empty(shape, dtype);
    require(static_cast<std::size_t>(t.numel()) * t.element_size() == size, ErrorCode::corrupt,
            "checkpoint: tensor size mismatch");
    std::memcpy(t.data_ptr(), bytes.data() + data_start + offset, size);
    checkpoint.tensors.push_back({entry.at("name").get<std::string>(), t});
  }
  return checkpoint;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = serialize_checkpoint(checkpoint);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write-then-rename so readers never observe a partial file.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(file_bytes(path)); }

Checkpoint capture(const torch::nn::Module& module, json meta) {
  Checkpoint checkpoint;
  checkpoint.meta = std::move(meta);
  for (const auto& item : module.named_parameters()) checkpoint.tensors.push_back({item.key(), item.value()});
  for (const auto& item : module.named_buffers()) checkpoint.tensors.push_back({item.key(), item.value()});
  return checkpoint;
}

void restore(torch::nn::Module& module, const Checkpoint& checkpoint, const std::string& prefix) {
  std::map<std::string, torch::Tensor> by_name;
  for (const auto& [name, value] : checkpoint.tensors) by_name.emplace(name, value);
  torch::NoGradGuard guard;
  auto load = [&](const std::string& name, torch::Tensor& target) {
    auto it = by_name.find(prefix + name);
    require(it != by_name.end(), ErrorCode::corrupt, "checkpoint: missing tensor " + prefix + name);
    require(it->second.sizes() == target.sizes(), ErrorCode::shape_mismatch,
            "checkpoint: shape mismatch for " + prefix + name);
    target.copy_(it->second.to(target.scalar_type()));
  };
  for (auto& item : module.named_parameters()) load(item.key(), item.value());
  for (auto& item : module.named_buffers()) load(item.key(), item.value());
}

// ---- STNet models -----------------------------------------------------------

std::string model_bytes(const LoadedModel& model) {
  json meta = {{"kind", "stnet"},
               {"config", model.model->config()},
               {"modality", to_string(model.modality)},
               {"categories", model.categories},
               {"tokenizer", model.tokenizer.serialize()}};
  return serialize_checkpoint(capture(*model.model, meta));
}

LoadedModel model_from_bytes(const std::string& bytes) {
  auto checkpoint = parse_checkpoint(bytes);
  require(checkpoint.meta.value("kind", std::string()) == "stnet", ErrorCode::corrupt,
          "checkpoint: not an STNet model");
  LoadedModel loaded;
  try {
    const auto config = checkpoint.meta.at("config").get<ModelConfig>();
    loaded.modality = parse_modality(checkpoint.meta.at("modality").get<std::string>());
    loaded.categories = checkpoint.meta.at("categories").get<std::vector<std::string>>();
    loaded.tokenizer = Tokenizer::parse(checkpoint.meta.at("tokenizer").get<std::string>());
    loaded.model = STNet(config);
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt, std::string("checkpoint: ") + e.what());
  }
  restore(*loaded.model, checkpoint);
  loaded.model->eval();
  loaded.fingerprint = crc32_hex(bytes);
  return loaded;
}

std::string save_model(const std::filesystem::path& path, const LoadedModel& model) {
  const auto bytes = model_bytes(model);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
  return crc32_hex(bytes);
}

LoadedModel load_model(const std::filesystem::path& path) { return model_from_bytes(file_bytes(path)); }

void save_classifier(const std::filesystem::path& path, const LoadedClassifier& classifier) {
  json meta = {{"kind", "sketch_classifier"},
               {"config", classifier.config},
               {"categories", classifier.categories}};
  write_checkpoint(path, capture(*classifier.model, meta));
}

LoadedClassifier load_classifier(const std::filesystem::path& path) {
  auto checkpoint = read_checkpoint(path);
  require(checkpoint.meta.value("kind", std::string()) == "sketch_classifier", ErrorCode::corrupt,
          "checkpoint: not a sketch classifier");
  LoadedClassifier loaded;
  try {
    loaded.config = checkpoint.meta.at("config").get<ModelConfig>();
    loaded.categories = checkpoint.meta.at("categories").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt, std::string("checkpoint: ") + e.what());
  }
  loaded.model = SketchClassifier(loaded.config, static_cast<int>(loaded.categories.size()));
  restore(*loaded.model, checkpoint);
  loaded.model->eval();
  return loaded;
}

void apply_pretrained(STNet& model) {
  for (const auto& [component, path] : model->config().pretrained) {
    auto checkpoint = read_checkpoint(path);
    const auto kind = checkpoint.meta.value("kind", std::string("component"));
    std::string prefix;
    if (kind == "stnet") prefix = component + ".";
    if (kind == "sketch_classifier") prefix = "encoder.";
    torch::nn::Module* target = nullptr;
    if (component == "text") target = model->text.get();
    if (component == "sketch") target = model->sketch.get();
    if (component == "image") target = model->image.get();
    require(target != nullptr, ErrorCode::invalid_argument, "pretrained: unknown component " + component);
    restore(*target, checkpoint, prefix);
  }
}

}  // namespace cstbir
