#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "metalm/corpus.hpp"
#include "metalm/crf.hpp"
#include "metalm/decoder.hpp"
#include "metalm/ner_data.hpp"
#include "metalm/tensor.hpp"

namespace metalm {

// A logged training trajectory: (step, value) with strictly increasing steps.
struct LossCurve {
  std::vector<std::pair<int64_t, double>> points;
};

// Smallest logged step whose value has closed 90% of the gap between the
// first and the last value; the first step when the curve is flat. No
// interpolation between log points.
int64_t t90(const LossCurve& curve);

// Trapezoidal area of the min-max-normalized values over the [0,1]-normalized
// step axis. A constant curve scores 0 by convention.
double normalized_auc(const LossCurve& curve);

// Least-squares slope of value against step over the first k logged points
// (fewer when the curve is shorter), in value per step.
double initial_slope(const LossCurve& curve, int64_t k = 5);

// Pull one numeric field per line out of a metrics.jsonl file; lines without
// the field are skipped.
LossCurve curve_from_metrics_jsonl(const std::filesystem::path& path, const std::string& field);

struct EffectiveRank {
  double er = 0.0;       // exp of the entropy of the normalized spectrum
  double per = 0.0;      // er / min(rows, cols)
  bool defined = false;  // false for an all-zero matrix
};

// Singular values sigma_i -> p_i = sigma_i / sum -> er = exp(-sum p ln p).
// Always computed in 64-bit; values below 1e-12 * sigma_max are dropped.
EffectiveRank effective_rank_proportional(const TensorD& matrix);
EffectiveRank effective_rank_proportional(const Tensor& matrix);

struct ParticleRecall {
  double value = 0.0;
  bool defined = false;  // false when the data has no person spans
  int64_t n_per = 0;
  int64_t n_matched = 0;
};

// Fraction of gold person spans whose immediately preceding word, lowercased,
// is one of the given particles. Sentence-initial spans count as unmatched.
ParticleRecall particle_recall(const NerDataset& data,
                               const std::set<std::string>& particles = {"si", "ni"});

// Fraction of word tokens (not types) absent from the vocabulary.
double oov_rate(const NerDataset& data, const Vocab& vocab);

// A model snapshot to probe, keyed by its pretraining step.
struct TunedModel {
  int64_t step = 0;
  DecoderParams params;
  CrfParams head;
};

struct ConfidencePoint {
  int64_t checkpoint_step = 0;
  double confidence = 0.0;  // mean p(gold tag) over the word's occurrences
};

struct ConfidenceSeries {
  std::string word;
  bool entity = false;  // the word occurs inside a gold span somewhere
  int64_t occurrences = 0;
  std::vector<ConfidencePoint> points;  // one per probed model, given order
};

// For the top_n most frequent surface words that ever sit inside a gold span
// and the top_n that never do: the mean forward-backward marginal probability
// of the gold tag at the word's positions, under each model. Entity words
// come first in the result; ties in frequency break alphabetically.
std::vector<ConfidenceSeries> token_confidence_series(const std::vector<TunedModel>& models,
                                                      const Vocab& vocab, const NerDataset& data,
                                                      int64_t top_n);

// Long-format dump: word,checkpoint_step,split,confidence with split one of
// "entity" / "non-entity".
void write_confidence_csv(const std::vector<ConfidenceSeries>& series,
                          const std::filesystem::path& path);

// Per token: -log p(gold tag) under model b minus under model a, both from
// CRF marginals. Negative means b is the more confident model. The sentence
// is truncated to the shorter of the two context windows.
std::vector<double> delta_logprob(const DecoderParams& params_a, const CrfParams& head_a,
                                  const DecoderParams& params_b, const CrfParams& head_b,
                                  const Vocab& vocab, const TaggedSentence& sentence);

// The marginal-surprisal primitive the delta is built from.
std::vector<double> gold_tag_surprisal(const TensorD& emissions, const CrfParamsD& crf,
                                       std::span<const int> tags);

// One measured value, keyed for plotting.
struct MetricRecord {
  int64_t step = 0;
  std::string dataset;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

// step,dataset,metric,value with full round-trip precision.
void export_metrics_csv(const std::vector<MetricRecord>& records,
                        const std::filesystem::path& path);
void export_metrics_jsonl(const std::vector<MetricRecord>& records,
                          const std::filesystem::path& path);
std::vector<MetricRecord> load_metrics_csv(const std::filesystem::path& path);

}  // namespace metalm
