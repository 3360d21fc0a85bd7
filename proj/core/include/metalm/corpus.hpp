#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "metalm/ner_data.hpp"
#include "metalm/rng.hpp"

namespace metalm {

// Word-level vocabulary with three reserved ids. Unknown words map to <unk>.
struct Vocab {
  static constexpr int32_t kUnk = 0;
  static constexpr int32_t kMask = 1;
  static constexpr int32_t kPad = 2;
  static constexpr int32_t kReserved = 3;

  std::vector<std::string> words;
  std::unordered_map<std::string, int32_t> index;

  // `words` must begin with the three reserved entries.
  static Vocab from_words(std::vector<std::string> words);
  static Vocab load_json(const std::filesystem::path& path);  // JSON array of strings
  void save_json(const std::filesystem::path& path) const;

  int32_t size() const { return static_cast<int32_t>(words.size()); }
  int32_t id_of(const std::string& w) const;
  const std::string& word_of(int32_t id) const;
  bool is_reserved(int32_t id) const { return id >= 0 && id < kReserved; }

  std::vector<int32_t> encode(const std::vector<std::string>& text) const;
};

// Most-frequent-first, ties broken lexicographically; reserved ids prepended.
// max_size counts the reserved entries.
Vocab build_vocab(const std::vector<std::vector<std::string>>& texts, int64_t max_size);

// Fixed-length packed id sequences used for language-model training.
struct PretokenizedCorpus {
  int64_t seq_len = 0;  // tokens per sequence, max_seq_len + 1
  std::vector<std::vector<int32_t>> sequences;

  int64_t size() const { return static_cast<int64_t>(sequences.size()); }
};

// JSONL, one {"ids": [...]} object per line. Every row must have exactly
// expected_len ids in [0, vocab_size); violations raise data errors with line
// numbers.
PretokenizedCorpus load_pretokenized(const std::filesystem::path& path, int64_t expected_len,
                                     int64_t vocab_size);
void save_pretokenized(const std::filesystem::path& path, const PretokenizedCorpus& corpus);

// Uniform with replacement; deterministic given the generator state.
std::vector<std::vector<int32_t>> sample_lm_batch(const PretokenizedCorpus& corpus, int64_t n,
                                                  Rng& rng);

// --- synthetic language -----------------------------------------------------
// A small templated language shared by the corpus and tagging generators:
// person names are introduced by closed-class particles (si/ni), locations by
// an oblique marker (sa), organizations by a determiner (ang) and spelled as
// two-token compounds. Filler text follows a Zipf unigram law with a fixed
// bigram successor rule so the stream is learnable by a small model.
struct SharedLexicon {
  std::vector<std::string> particles;      // immediately precede person names
  std::string oblique;                     // precedes places
  std::string determiner;                  // introduces organizations
  std::vector<std::string> verbs;
  std::vector<std::string> base_names;     // appear in the pretraining corpus
  std::vector<std::string> extra_names;    // never in the corpus (high-OOV finetune data)
  std::vector<std::string> dialect_names;  // never in the corpus, disjoint eval pool
  std::vector<std::string> places;
  std::vector<std::string> org_heads, org_tails;          // in-corpus compounds
  std::vector<std::string> dialect_org_heads, dialect_org_tails;
  std::vector<std::string> fillers;
};
const SharedLexicon& shared_lexicon();

struct SyntheticCorpusOptions {
  int64_t vocab_size = 256;
  int64_t n_sequences = 400;
  int64_t seq_len = 33;
  uint64_t seed = 0;
};

struct SyntheticCorpus {
  Vocab vocab;
  PretokenizedCorpus corpus;
};

SyntheticCorpus gen_synthetic_corpus(const SyntheticCorpusOptions& opt);

struct SyntheticNerOptions {
  int64_t n_sentences = 400;
  // Fraction of person mentions immediately preceded by si/ni.
  double particle_rate = 1.0;
  // Fraction of organization mentions introduced by the determiner.
  double org_anchor_rate = 1.0;
  // Fraction of entity slots drawn from the never-in-corpus pool.
  double oov_name_rate = 0.3;
  // Dialect sentences use the disjoint name pools exclusively.
  bool dialect = false;
  uint64_t seed = 0;
  std::string dataset_id = "synthetic-ner";
};

NerDataset gen_synthetic_ner(const SyntheticNerOptions& opt);

}  // namespace metalm
