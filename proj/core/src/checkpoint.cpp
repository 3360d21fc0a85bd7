#include "metalm/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <set>

#include "metalm/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "weights.bin is written as native little-endian float32");

namespace metalm {

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

const Tensor& Checkpoint::expect(const std::string& name, const Shape& shape) const {
  const Tensor* t = find(name);
  require(t != nullptr, ErrorKind::checkpoint, "checkpoint is missing tensor '" + name + "'");
  require(t->shape() == shape, ErrorKind::checkpoint,
          "tensor '" + name + "' has shape " + shape_str(t->shape()) + ", expected " +
              shape_str(shape));
  return *t;
}

void save_checkpoint(const std::filesystem::path& dir, int64_t step,
                     const std::vector<SaveEntry>& entries, const nlohmann::json& config,
                     const std::string& rng_hex, const Vocab* vocab) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorKind::io, "cannot create checkpoint directory '" + dir.string() + "'");

  nlohmann::json manifest;
  manifest["step"] = step;
  manifest["config"] = config;
  manifest["rng"] = rng_hex;
  auto& tensors = manifest["tensors"] = nlohmann::json::array();

  std::ofstream weights(dir / "weights.bin", std::ios::binary);
  require(weights.good(), ErrorKind::io, "cannot write '" + (dir / "weights.bin").string() + "'");
  std::set<std::string> seen;
  int64_t offset = 0;
  for (const auto& entry : entries) {
    require(seen.insert(entry.name).second, ErrorKind::checkpoint,
            "duplicate checkpoint tensor '" + entry.name + "'");
    Shape shape = entry.shape;
    if (shape.empty()) shape = {static_cast<int64_t>(entry.data.size())};
    require(shape_numel(shape) == static_cast<int64_t>(entry.data.size()), ErrorKind::checkpoint,
            "tensor '" + entry.name + "' data does not match its shape");
    nlohmann::json t;
    t["name"] = entry.name;
    t["shape"] = shape;
    t["dtype"] = "f32";
    t["offset"] = offset;
    tensors.push_back(std::move(t));
    weights.write(reinterpret_cast<const char*>(entry.data.data()),
                  static_cast<std::streamsize>(entry.data.size() * sizeof(float)));
    offset += static_cast<int64_t>(entry.data.size() * sizeof(float));
  }
  weights.close();
  require(weights.good(), ErrorKind::io, "write failed for '" + (dir / "weights.bin").string() + "'");

  std::ofstream mf(dir / "manifest.json");
  require(mf.good(), ErrorKind::io, "cannot write '" + (dir / "manifest.json").string() + "'");
  mf << manifest.dump(2) << '\n';
  mf.close();
  require(mf.good(), ErrorKind::io, "write failed for '" + (dir / "manifest.json").string() + "'");

  if (vocab != nullptr) vocab->save_json(dir / "vocab.json");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  auto manifest_path = dir / "manifest.json";
  std::ifstream mf(manifest_path);
  require(mf.good(), ErrorKind::io, "cannot open '" + manifest_path.string() + "'");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, manifest_path.string() + ": " + e.what());
  }
  require(manifest.is_object() && manifest.contains("step") && manifest.contains("tensors"),
          ErrorKind::checkpoint, manifest_path.string() + ": manifest missing step or tensors");

  Checkpoint ck;
  require(manifest["step"].is_number_integer(), ErrorKind::checkpoint,
          manifest_path.string() + ": step must be an integer");
  ck.step = manifest["step"].get<int64_t>();
  if (manifest.contains("config")) ck.config = manifest["config"];
  if (manifest.contains("rng")) {
    require(manifest["rng"].is_string(), ErrorKind::checkpoint,
            manifest_path.string() + ": rng state must be a string");
    ck.rng_hex = manifest["rng"].get<std::string>();
  }

  auto weights_path = dir / "weights.bin";
  std::ifstream weights(weights_path, std::ios::binary | std::ios::ate);
  require(weights.good(), ErrorKind::io, "cannot open '" + weights_path.string() + "'");
  int64_t file_size = static_cast<int64_t>(weights.tellg());

  require(manifest["tensors"].is_array(), ErrorKind::checkpoint,
          manifest_path.string() + ": tensors must be an array");
  std::set<std::string> seen;
  for (const auto& t : manifest["tensors"]) {
    require(t.is_object() && t.contains("name") && t.contains("shape") && t.contains("dtype") &&
                t.contains("offset"),
            ErrorKind::checkpoint, manifest_path.string() + ": malformed tensor entry");
    std::string name = t["name"].get<std::string>();
    require(seen.insert(name).second, ErrorKind::checkpoint,
            "duplicate checkpoint tensor '" + name + "'");
    require(t["dtype"].get<std::string>() == "f32", ErrorKind::checkpoint,
            "tensor '" + name + "' has unsupported dtype '" + t["dtype"].get<std::string>() + "'");
    Shape shape;
    for (const auto& d : t["shape"]) {
      require(d.is_number_integer() && d.get<int64_t>() > 0, ErrorKind::checkpoint,
              "tensor '" + name + "' has a non-positive dimension");
      shape.push_back(d.get<int64_t>());
    }
    int64_t offset = t["offset"].get<int64_t>();
    int64_t n = shape_numel(shape);
    int64_t end = offset + n * static_cast<int64_t>(sizeof(float));
    require(offset >= 0 && end <= file_size, ErrorKind::checkpoint,
            "tensor '" + name + "' lies outside weights.bin (bytes " + std::to_string(offset) +
                ".." + std::to_string(end) + " of " + std::to_string(file_size) + ")");

    std::vector<float> data(static_cast<size_t>(n));
    weights.seekg(offset);
    weights.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(float)));
    require(weights.good(), ErrorKind::io, "read failed for '" + weights_path.string() + "'");
    ck.tensors.emplace_back(name, Tensor::from(shape, std::move(data)));
  }

  if (std::filesystem::exists(dir / "vocab.json")) ck.vocab = Vocab::load_json(dir / "vocab.json");
  return ck;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  auto pick_int = [&](const char* key, int64_t& out) {
    require(j.contains(key) && j[key].is_number_integer(), ErrorKind::checkpoint,
            std::string("model config is missing integer '") + key + "'");
    out = j[key].get<int64_t>();
  };
  pick_int("d_model", cfg.d_model);
  pick_int("n_layers", cfg.n_layers);
  pick_int("n_heads", cfg.n_heads);
  pick_int("n_kv_heads", cfg.n_kv_heads);
  pick_int("d_ff", cfg.d_ff);
  pick_int("vocab_size", cfg.vocab_size);
  pick_int("max_seq_len", cfg.max_seq_len);
  if (j.contains("norm_eps")) cfg.norm_eps = j["norm_eps"].get<double>();
  if (j.contains("rope_theta")) cfg.rope_theta = j["rope_theta"].get<double>();
  cfg.validate();
  return cfg;
}

DecoderParams decoder_from_checkpoint(const Checkpoint& ck) {
  require(ck.config.contains("model"), ErrorKind::checkpoint,
          "checkpoint config has no model section");
  ModelConfig cfg = model_config_from_json(ck.config["model"]);
  Rng scratch(0);
  auto params = DecoderParams::init(cfg, scratch);
  for (auto& [name, t] : params.named_tensors()) {
    const Tensor& src = ck.expect(name, t.shape());
    auto dst = t.mutable_data();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }
  return params;
}

}  // namespace metalm
