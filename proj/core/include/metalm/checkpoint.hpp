#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metalm/corpus.hpp"
#include "metalm/decoder.hpp"
#include "metalm/tensor.hpp"

namespace metalm {

// A checkpoint is a directory holding
//   manifest.json  {"step", "tensors": [{name, shape, dtype, offset}],
//                   "config", "rng"}
//   weights.bin    raw little-endian float32, laid out per the manifest
//   vocab.json     the vocabulary the run was tokenized with (if any)
// Offsets are byte positions into weights.bin; entries appear in save order.

struct CheckpointTensor {
  std::string name;
  Shape shape;
  int64_t offset = 0;  // bytes into weights.bin
};

struct Checkpoint {
  int64_t step = 0;
  nlohmann::json config;
  std::string rng_hex;
  std::vector<std::pair<std::string, Tensor>> tensors;  // manifest order
  std::optional<Vocab> vocab;

  const Tensor* find(const std::string& name) const;
  // Checkpoint error when the name is missing or the shape differs.
  const Tensor& expect(const std::string& name, const Shape& shape) const;
};

// Named views over the floats to serialize; `shape` may be empty for flat
// auxiliary buffers like optimizer state.
struct SaveEntry {
  std::string name;
  Shape shape;
  std::span<const float> data;
};

void save_checkpoint(const std::filesystem::path& dir, int64_t step,
                     const std::vector<SaveEntry>& entries, const nlohmann::json& config,
                     const std::string& rng_hex, const Vocab* vocab);

Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Model dimensions from a manifest's "model" object; checkpoint error when
// keys are missing or malformed.
ModelConfig model_config_from_json(const nlohmann::json& j);

// Rebuild the decoder a checkpoint was saved from, weights included.
DecoderParams decoder_from_checkpoint(const Checkpoint& ck);

}  // namespace metalm
