#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metalm/rng.hpp"
#include "metalm/tags.hpp"
#include "metalm/tensor.hpp"

namespace metalm {

// Linear-chain tagging head. A path y over K tags scores
//   start[y_0] + sum_t emissions[t][y_t] + sum_t trans[y_{t-1}][y_t] + end[y_T]
// and the head is trained by exact negative log likelihood.
template <class T>
struct CrfParamsT {
  TensorT<T> proj;   // [d_model, K] emission projection of backbone states
  TensorT<T> trans;  // [K, K]; trans[i][j] scores tag j following tag i
  TensorT<T> start;  // [K]
  TensorT<T> end;    // [K]

  // Projection ~ N(0, 0.02^2), scores zero (uniform paths before training).
  static CrfParamsT init(int64_t d_model, Rng& rng);
  std::vector<std::pair<std::string, TensorT<T>>> named_tensors() const;
  CrfParamsT& set_requires_grad(bool v);
};

using CrfParams = CrfParamsT<float>;
using CrfParamsD = CrfParamsT<double>;

// hidden: [T, d_model] -> emissions [T, K].
template <class T>
TensorT<T> crf_emissions(TapeT<T>* tape, const TensorT<T>& hidden, const CrfParamsT<T>& crf);

// log sum over all K^T paths of exp(path score), by the forward recursion in
// log space. Differentiable in the emissions and the transition scores.
template <class T>
TensorT<T> log_partition(TapeT<T>* tape, const TensorT<T>& emissions, const CrfParamsT<T>& crf);

// log_partition minus the gold path score.
template <class T>
TensorT<T> crf_nll(TapeT<T>* tape, const TensorT<T>& emissions, std::span<const int> labels,
                   const CrfParamsT<T>& crf);

// Highest-scoring path, scored in double; ties resolve to the lowest label
// index at each backtrack step. With `constrained`, starts and transitions
// that violate IOB2 are masked out, so the result is always a valid sequence.
template <class T>
std::vector<int> viterbi_decode(const TensorT<T>& emissions, const CrfParamsT<T>& crf,
                                bool constrained = true);

// Posterior tag distribution per position by forward-backward, in double.
// Rows sum to 1.
template <class T>
std::vector<std::array<double, TagScheme::kCount>> tag_marginals(const TensorT<T>& emissions,
                                                                 const CrfParamsT<T>& crf);

// A labeled [start, end] word range (end inclusive).
struct Span {
  int64_t start = 0;
  int64_t end = 0;
  int entity = 0;  // TagScheme entity type index

  friend bool operator==(const Span&, const Span&) = default;
  friend auto operator<=>(const Span&, const Span&) = default;
};

// Maximal B-X (I-X)* runs become spans. An I-X with no matching open span
// (sequence start, after O, or after another type) starts a new span of its
// type, so damaged sequences still yield usable spans.
std::vector<Span> spans_from_bio(std::span<const int> tags);
std::vector<Span> spans_from_bio(const std::vector<std::string>& tags);

struct F1Stats {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool undefined = false;  // no predictions and no gold: scores are 0 by convention
  int64_t tp = 0;
  int64_t n_pred = 0;
  int64_t n_gold = 0;
};

// Exact-match span scoring pooled over sentences: a prediction counts iff
// (start, end, type) all match a gold span of the same sentence.
F1Stats micro_f1(const std::vector<std::vector<Span>>& pred,
                 const std::vector<std::vector<Span>>& gold);

// micro_f1 restricted to each entity type, indexed PER, LOC, ORG.
std::array<F1Stats, 3> per_type_f1(const std::vector<std::vector<Span>>& pred,
                                   const std::vector<std::vector<Span>>& gold);

// Token-level alternative: a token counts as predicted (gold) when its tag is
// not O; true positives are exact tag matches on non-O gold.
F1Stats token_micro_f1(const std::vector<std::vector<int>>& pred,
                       const std::vector<std::vector<int>>& gold);

}  // namespace metalm
