#include "metalm/episodes.hpp"

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

#include "metalm/errors.hpp"

namespace metalm {

EpisodeSampler::EpisodeSampler(const PretokenizedCorpus& corpus, EpisodeSamplerOptions opt)
    : corpus_(&corpus), opt_(opt) {
  require(corpus.size() > 0, ErrorKind::data, "episode sampler needs a non-empty corpus");
  require(opt.n_way >= 2, ErrorKind::config, "n_way must be at least 2");
  require(opt.k_shot >= 1 && opt.n_query >= 1, ErrorKind::config,
          "k_shot and n_query must be positive");
  require(opt.max_doc_frac > 0.0 && opt.max_doc_frac <= 1.0, ErrorKind::config,
          "max_doc_frac must lie in (0,1]");
  example_len_ = opt.example_len > 0 ? opt.example_len : corpus.seq_len - 1;
  require(example_len_ >= 1 && example_len_ <= corpus.seq_len, ErrorKind::config,
          "example_len must lie in [1, seq_len]");

  std::unordered_map<int32_t, std::vector<int64_t>> postings;
  std::unordered_set<int32_t> seen;
  for (int64_t s = 0; s < corpus.size(); ++s) {
    const auto& row = corpus.sequences[static_cast<size_t>(s)];
    seen.clear();
    for (int64_t i = 0; i < example_len_; ++i) {
      int32_t id = row[static_cast<size_t>(i)];
      if (id < Vocab::kReserved) continue;
      if (seen.insert(id).second) postings[id].push_back(s);
    }
  }

  int64_t need = opt.k_shot + opt.n_query;
  double cap = opt.max_doc_frac * static_cast<double>(corpus.size());
  for (auto& [word, rows] : postings) {
    if (static_cast<int64_t>(rows.size()) < need) continue;
    if (static_cast<double>(rows.size()) >= cap) continue;
    eligible_.push_back(word);
  }
  std::sort(eligible_.begin(), eligible_.end());
  postings_.reserve(eligible_.size());
  for (int32_t word : eligible_) postings_.push_back(std::move(postings[word]));
}

EpisodeExample EpisodeSampler::make_example(int64_t row, int32_t word, int32_t label) const {
  const auto& src = corpus_->sequences[static_cast<size_t>(row)];
  EpisodeExample ex;
  ex.ids.assign(src.begin(), src.begin() + example_len_);
  ex.label = label;
  ex.source_index = row;
  for (int64_t i = 0; i < example_len_; ++i)
    if (ex.ids[static_cast<size_t>(i)] == word) {
      ex.ids[static_cast<size_t>(i)] = Vocab::kMask;
      ex.masked_positions.push_back(i);
    }
  return ex;
}

Episode EpisodeSampler::sample(Rng& rng) const {
  int64_t n_eligible = static_cast<int64_t>(eligible_.size());
  require(n_eligible >= opt_.n_way, ErrorKind::episode,
          "need " + std::to_string(opt_.n_way) + " eligible words, found " +
              std::to_string(n_eligible));

  constexpr int kAttempts = 50;
  int64_t need = opt_.k_shot + opt_.n_query;
  std::vector<int64_t> word_order(eligible_.size());
  for (size_t i = 0; i < word_order.size(); ++i) word_order[i] = static_cast<int64_t>(i);

  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    // Partial Fisher-Yates: the first n_way entries become the class words.
    for (int64_t i = 0; i < opt_.n_way; ++i) {
      int64_t j = i + rng.uniform_int(n_eligible - i);
      std::swap(word_order[static_cast<size_t>(i)], word_order[static_cast<size_t>(j)]);
    }

    std::vector<std::vector<int64_t>> support_rows(static_cast<size_t>(opt_.n_way));
    std::vector<std::vector<int64_t>> query_rows(static_cast<size_t>(opt_.n_way));
    std::unordered_set<int64_t> support_set, query_set;
    for (int64_t c = 0; c < opt_.n_way; ++c) {
      auto rows = postings_[static_cast<size_t>(word_order[static_cast<size_t>(c)])];
      for (int64_t i = 0; i < need; ++i) {
        int64_t j = i + rng.uniform_int(static_cast<int64_t>(rows.size()) - i);
        std::swap(rows[static_cast<size_t>(i)], rows[static_cast<size_t>(j)]);
      }
      for (int64_t i = 0; i < opt_.k_shot; ++i) {
        support_rows[static_cast<size_t>(c)].push_back(rows[static_cast<size_t>(i)]);
        support_set.insert(rows[static_cast<size_t>(i)]);
      }
      for (int64_t i = opt_.k_shot; i < need; ++i) {
        query_rows[static_cast<size_t>(c)].push_back(rows[static_cast<size_t>(i)]);
        query_set.insert(rows[static_cast<size_t>(i)]);
      }
    }

    bool disjoint = true;
    for (int64_t row : query_set)
      if (support_set.count(row)) {
        disjoint = false;
        break;
      }
    if (!disjoint) continue;

    Episode ep;
    ep.n_way = opt_.n_way;
    ep.k_shot = opt_.k_shot;
    ep.n_query = opt_.n_query;
    for (int64_t c = 0; c < opt_.n_way; ++c)
      ep.class_words.push_back(eligible_[static_cast<size_t>(word_order[static_cast<size_t>(c)])]);
    for (int64_t c = 0; c < opt_.n_way; ++c)
      for (int64_t row : support_rows[static_cast<size_t>(c)])
        ep.support.push_back(make_example(row, ep.class_words[static_cast<size_t>(c)],
                                          static_cast<int32_t>(c)));
    for (int64_t c = 0; c < opt_.n_way; ++c)
      for (int64_t row : query_rows[static_cast<size_t>(c)])
        ep.query.push_back(make_example(row, ep.class_words[static_cast<size_t>(c)],
                                        static_cast<int32_t>(c)));
    return ep;
  }
  fail(ErrorKind::episode,
       "could not separate support and query rows after " + std::to_string(kAttempts) +
           " attempts");
}

}  // namespace metalm
