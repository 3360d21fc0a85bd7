#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "metalm/checkpoint.hpp"
#include "metalm/corpus.hpp"
#include "metalm/crf.hpp"
#include "metalm/decoder.hpp"
#include "metalm/ner_data.hpp"
#include "metalm/optimizer.hpp"

namespace metalm {

enum class Regime { head_only, full };

Regime regime_from_string(const std::string& name);  // config error on unknown names
std::string to_string(Regime regime);

struct FinetuneConfig {
  Regime regime = Regime::head_only;
  double lr = 3e-5;
  int64_t max_epochs = 10;
  int64_t patience = 2;     // extra non-improving dev epochs tolerated before stopping
  int64_t batch_size = 16;  // sentences per optimizer step (gradient accumulation)
  uint64_t seed = 0;
  AdamWOptions adamw;
  std::string source;                 // training dataset id, for reports
  std::vector<std::string> eval_ids;  // datasets to score after tuning
  // Test hook: when non-empty, epoch e reports this dev score instead of the
  // measured one (last entry repeats), to pin down the early-stop arithmetic.
  std::vector<double> dev_f1_override_for_test;

  void validate() const;
};

struct DatasetScore {
  std::string eval_id;
  F1Stats micro;
  std::array<F1Stats, 3> per_type;  // PER, LOC, ORG
  int64_t n_sentences = 0;
  int64_t n_gold_spans = 0;
  int64_t n_pred_spans = 0;
};

struct EvalReport {
  std::vector<DatasetScore> datasets;
  double final_train_loss = 0.0;  // mean sentence loss over the last epoch run
  int64_t epochs_run = 0;
  int64_t best_dev_epoch = -1;
  double best_dev_f1 = 0.0;
  std::string checkpoint_id;
  std::string regime;
  std::string source;
  uint64_t seed = 0;
  bool span_level = true;  // scoring convention used by `datasets`

  nlohmann::json to_json() const;
};

// Tracks which dataset ids reached an optimizer versus only being decoded, so
// zero-shot claims can be audited mechanically.
class DatasetAudit {
 public:
  void note_train(const std::string& id) { trained_.insert(id); }
  void note_eval(const std::string& id) { evaluated_.insert(id); }
  const std::set<std::string>& trained() const { return trained_; }
  const std::set<std::string>& evaluated() const { return evaluated_; }
  // Config error if any evaluated id was also trained on.
  void require_zero_shot() const;

 private:
  std::set<std::string> trained_, evaluated_;
};

struct FinetuneResult {
  DecoderParams params;
  CrfParams head;
  Vocab vocab;
  EvalReport report;  // training metadata; dataset scores appended by evaluate_model
};

// Rebuild the saved model and attach a fresh tagging head, then train under
// the configured regime with early stopping on dev micro-F1 and return the
// best-dev weights. When no dev set is supplied, sentences with index % 10 ==
// 9 are split off as dev. head_only keeps the backbone bit-identical.
FinetuneResult finetune_run(const Checkpoint& ck, const NerDataset& train,
                            const FinetuneConfig& cfg, const NerDataset* dev = nullptr,
                            DatasetAudit* audit = nullptr);

// Decode every sentence with constrained Viterbi and score spans. Never
// updates weights; scores datasets in the order given.
EvalReport evaluate_model(const DecoderParams& params, const CrfParams& head, const Vocab& vocab,
                          const std::vector<NerDataset>& datasets,
                          DatasetAudit* audit = nullptr);

// Sentence words to backbone ids, truncated to the model's window.
std::vector<int32_t> encode_sentence(const Vocab& vocab, const TaggedSentence& sentence,
                                     int64_t max_len);

struct SweepRow {
  int64_t step = 0;
  std::string regime;
  std::string source;
  std::string eval_id;
  double micro_f1 = 0.0;
  double per_f1 = 0.0;
  double loc_f1 = 0.0;
  double org_f1 = 0.0;
  double final_train_loss = 0.0;
  int64_t epochs = 0;
  std::string status;  // "ok" or "failed"
};

// One finetune + evaluation per step_* checkpoint under `checkpoints_dir`,
// ascending by step. Rows append to `csv_path` as they finish; rows already
// present are trusted and their cells are not recomputed, so an interrupted
// sweep resumes where it stopped. A checkpoint that fails to load or train
// logs a warning and yields rows with status "failed". Returns the full table
// (reused and fresh rows) in step order.
std::vector<SweepRow> sweep_checkpoints(const std::filesystem::path& checkpoints_dir,
                                        const NerDataset& train, const FinetuneConfig& cfg,
                                        const std::vector<NerDataset>& evals,
                                        const std::filesystem::path& csv_path);

std::vector<SweepRow> load_sweep_csv(const std::filesystem::path& csv_path);

}  // namespace metalm
