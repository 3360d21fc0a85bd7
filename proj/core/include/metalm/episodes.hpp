#pragma once

#include <cstdint>
#include <vector>

#include "metalm/corpus.hpp"
#include "metalm/rng.hpp"

namespace metalm {

// One masked-word classification example: a corpus row with every occurrence
// of the class word replaced by <mask>.
struct EpisodeExample {
  std::vector<int32_t> ids;
  std::vector<int64_t> masked_positions;
  int32_t label = 0;
  int64_t source_index = 0;  // row in the corpus the example was cut from
};

// N-way classification task over masked words, with class-major ordering:
// support holds k_shot examples for class 0, then class 1, and so on.
struct Episode {
  int64_t n_way = 0;
  int64_t k_shot = 0;
  int64_t n_query = 0;
  std::vector<int32_t> class_words;  // one vocab id per class
  std::vector<EpisodeExample> support;
  std::vector<EpisodeExample> query;
};

struct EpisodeSamplerOptions {
  int64_t n_way = 4;
  int64_t k_shot = 2;
  int64_t n_query = 2;
  // A word is eligible as a class when it occurs in at least k_shot + n_query
  // rows and in strictly less than max_doc_frac of all rows.
  double max_doc_frac = 0.2;
  // Tokens of each row visible to the classifier; 0 means seq_len - 1, the
  // span a language-model step would consume as input.
  int64_t example_len = 0;
};

// Draws word-classification episodes from a packed corpus. Within an episode
// no row serves as both support and query, so query loss measures adaptation
// to unseen text rather than memorisation of the adaptation set.
class EpisodeSampler {
 public:
  EpisodeSampler(const PretokenizedCorpus& corpus, EpisodeSamplerOptions opt);

  // Vocab ids usable as episode classes, ascending.
  const std::vector<int32_t>& eligible_words() const { return eligible_; }
  int64_t example_len() const { return example_len_; }

  // Raises an episode error when too few words are eligible or when support
  // and query rows cannot be separated.
  Episode sample(Rng& rng) const;

 private:
  EpisodeExample make_example(int64_t row, int32_t word, int32_t label) const;

  const PretokenizedCorpus* corpus_;
  EpisodeSamplerOptions opt_;
  int64_t example_len_ = 0;
  std::vector<int32_t> eligible_;
  std::vector<std::vector<int64_t>> postings_;  // rows containing eligible_[i]
};

}  // namespace metalm
