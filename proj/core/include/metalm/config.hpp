#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

#include <json.hpp>

#include "metalm/corpus.hpp"
#include "metalm/decoder.hpp"
#include "metalm/finetune.hpp"
#include "metalm/trainer.hpp"

namespace metalm {

// Where pretraining text comes from: files when `corpus` is set, otherwise
// generated on the fly from the synthetic-language options.
struct DataConfig {
  std::filesystem::path corpus;  // pretokenized sequences
  std::filesystem::path vocab;   // vocabulary JSON, required with `corpus`
  SyntheticCorpusOptions synthetic;
};

struct AnalysisConfig {
  std::set<std::string> particles = {"si", "ni"};
  int64_t top_n = 10;
  int64_t slope_k = 5;
};

// One structured file drives every subcommand. Sections: model (object or
// tier name), train (with nested lr/adamw), meta, data, finetune, analysis.
// Unknown keys anywhere are rejected so typos cannot silently fall back to
// defaults; absent keys keep the documented defaults.
struct RunConfig {
  std::string tier;  // set when the model section named a preset
  TrainConfig train;
  FinetuneConfig finetune;
  DataConfig data;
  AnalysisConfig analysis;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  // Fully resolved snapshot: every effective value, suitable for reproducing
  // the run and written into each run directory.
  nlohmann::json to_json() const;

  void validate() const;
};

}  // namespace metalm
