#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <unordered_set>

#include "metalm/episodes.hpp"
#include "metalm/errors.hpp"

using metalm::Episode;
using metalm::EpisodeSampler;
using metalm::EpisodeSamplerOptions;
using metalm::PretokenizedCorpus;
using metalm::Rng;
using metalm::Vocab;

namespace {

constexpr int32_t kA = 10, kB = 11, kC = 12, kD = 13, kCommon = 14, kFill = 15, kLate = 16;

// 20 rows of length 6. kCommon appears everywhere, kA in rows 0-5 (twice in
// row 0), kB in rows 6-10, kC in rows 11-14, kD in rows 15-16, and kLate only
// at the final position, outside the default example span of 5 tokens.
PretokenizedCorpus fixture_corpus() {
  PretokenizedCorpus corpus;
  corpus.seq_len = 6;
  for (int64_t i = 0; i < 20; ++i) {
    std::vector<int32_t> row{kCommon, kFill, kFill, kFill, kFill, i < 6 ? kLate : kFill};
    if (i < 6) {
      row[1] = kA;
      if (i == 0) row[3] = kA;
    } else if (i < 11) {
      row[2] = kB;
    } else if (i < 15) {
      row[3] = kC;
    } else if (i < 17) {
      row[1] = kD;
    }
    corpus.sequences.push_back(std::move(row));
  }
  return corpus;
}

EpisodeSamplerOptions fixture_options() {
  EpisodeSamplerOptions opt;
  opt.n_way = 3;
  opt.k_shot = 2;
  opt.n_query = 2;
  opt.max_doc_frac = 0.9;
  return opt;
}

}  // namespace

TEST_CASE("eligibility filters rare, common, reserved, and out-of-span words") {
  auto corpus = fixture_corpus();
  EpisodeSampler sampler(corpus, fixture_options());
  // kD occurs twice (< k+q), kCommon in every row (>= 90%), kFill in every
  // row, kLate only beyond the example span.
  CHECK(sampler.eligible_words() == std::vector<int32_t>{kA, kB, kC});
  CHECK(sampler.example_len() == 5);

  SUBCASE("extending the example span admits the late word") {
    auto opt = fixture_options();
    opt.example_len = 6;
    EpisodeSampler wide(corpus, opt);
    CHECK(wide.eligible_words() == std::vector<int32_t>{kA, kB, kC, kLate});
  }
  SUBCASE("the document-frequency cap is strict") {
    PretokenizedCorpus small;
    small.seq_len = 3;
    for (int64_t i = 0; i < 10; ++i)
      small.sequences.push_back({i < 2 ? kA : kFill, kFill, kFill});
    EpisodeSamplerOptions opt;
    opt.n_way = 2;
    opt.k_shot = 1;
    opt.n_query = 1;
    opt.max_doc_frac = 0.2;  // kA sits in exactly 20% of rows: excluded
    EpisodeSampler tight(small, opt);
    CHECK(tight.eligible_words().empty());
    opt.max_doc_frac = 0.21;
    EpisodeSampler loose(small, opt);
    CHECK(loose.eligible_words() == std::vector<int32_t>{kA});
  }
}

TEST_CASE("sampled episodes are class-major and mask every occurrence") {
  auto corpus = fixture_corpus();
  EpisodeSampler sampler(corpus, fixture_options());
  Rng rng(5);
  Episode ep = sampler.sample(rng);

  CHECK(ep.n_way == 3);
  CHECK(ep.class_words.size() == 3);
  std::set<int32_t> words(ep.class_words.begin(), ep.class_words.end());
  CHECK(words == std::set<int32_t>{kA, kB, kC});

  REQUIRE(ep.support.size() == 6);
  REQUIRE(ep.query.size() == 6);
  std::vector<int32_t> expect_labels{0, 0, 1, 1, 2, 2};
  for (size_t i = 0; i < 6; ++i) {
    CHECK(ep.support[i].label == expect_labels[i]);
    CHECK(ep.query[i].label == expect_labels[i]);
  }

  auto check_example = [&](const metalm::EpisodeExample& ex) {
    int32_t word = ep.class_words[static_cast<size_t>(ex.label)];
    const auto& src = corpus.sequences[static_cast<size_t>(ex.source_index)];
    REQUIRE(ex.ids.size() == 5);
    REQUIRE(!ex.masked_positions.empty());
    for (size_t i = 0; i < ex.ids.size(); ++i) {
      CHECK(ex.ids[i] != word);
      if (src[i] == word) {
        CHECK(ex.ids[i] == Vocab::kMask);
      } else {
        CHECK(ex.ids[i] == src[i]);
      }
    }
    for (int64_t p : ex.masked_positions) CHECK(src[static_cast<size_t>(p)] == word);
  };
  for (const auto& ex : ep.support) check_example(ex);
  for (const auto& ex : ep.query) check_example(ex);

  SUBCASE("row 0 masks the word at both of its positions") {
    bool saw_double = false;
    for (int trial = 0; trial < 200 && !saw_double; ++trial) {
      Episode e = sampler.sample(rng);
      for (const auto& ex : e.support)
        if (ex.source_index == 0 && e.class_words[static_cast<size_t>(ex.label)] == kA)
          saw_double = ex.masked_positions == std::vector<int64_t>{1, 3};
      for (const auto& ex : e.query)
        if (ex.source_index == 0 && e.class_words[static_cast<size_t>(ex.label)] == kA)
          saw_double = ex.masked_positions == std::vector<int64_t>{1, 3};
    }
    CHECK(saw_double);
  }
}

TEST_CASE("support and query rows never overlap") {
  auto corpus = fixture_corpus();
  EpisodeSampler sampler(corpus, fixture_options());
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    Episode ep = sampler.sample(rng);
    std::unordered_set<int64_t> support_rows, query_rows;
    for (const auto& ex : ep.support) support_rows.insert(ex.source_index);
    for (const auto& ex : ep.query) query_rows.insert(ex.source_index);
    for (int64_t row : query_rows) CHECK(!support_rows.count(row));
    for (int64_t c = 0; c < ep.n_way; ++c) {
      std::set<int64_t> class_rows;
      for (const auto& ex : ep.support)
        if (ex.label == c) class_rows.insert(ex.source_index);
      for (const auto& ex : ep.query)
        if (ex.label == c) class_rows.insert(ex.source_index);
      CHECK(class_rows.size() == static_cast<size_t>(ep.k_shot + ep.n_query));
    }
  }
}

TEST_CASE("episode sampling is deterministic given the generator state") {
  auto corpus = fixture_corpus();
  EpisodeSampler sampler(corpus, fixture_options());
  Rng a(123), b(123);
  for (int trial = 0; trial < 20; ++trial) {
    Episode ea = sampler.sample(a);
    Episode eb = sampler.sample(b);
    CHECK(ea.class_words == eb.class_words);
    REQUIRE(ea.support.size() == eb.support.size());
    for (size_t i = 0; i < ea.support.size(); ++i) {
      CHECK(ea.support[i].ids == eb.support[i].ids);
      CHECK(ea.support[i].source_index == eb.support[i].source_index);
    }
    for (size_t i = 0; i < ea.query.size(); ++i) CHECK(ea.query[i].ids == eb.query[i].ids);
  }
}

TEST_CASE("episode errors name the deficit or the separation failure") {
  auto corpus = fixture_corpus();
  auto opt = fixture_options();
  opt.n_way = 4;  // only 3 eligible words exist
  EpisodeSampler sampler(corpus, opt);
  Rng rng(1);
  try {
    sampler.sample(rng);
    CHECK(false);
  } catch (const metalm::Error& e) {
    CHECK(e.kind() == metalm::ErrorKind::episode);
    CHECK(std::string(e.what()).find("4") != std::string::npos);
    CHECK(std::string(e.what()).find("3") != std::string::npos);
  }

  SUBCASE("an unseparable corpus fails after bounded retries") {
    // Three rows forming an odd cycle: every 2-coloring of rows into support
    // and query sides leaves some class with both its rows on one side.
    PretokenizedCorpus tri;
    tri.seq_len = 4;
    tri.sequences = {{kA, kC, kFill, kFill}, {kA, kB, kFill, kFill}, {kB, kC, kFill, kFill}};
    EpisodeSamplerOptions topt;
    topt.n_way = 3;
    topt.k_shot = 1;
    topt.n_query = 1;
    topt.max_doc_frac = 1.0;
    EpisodeSampler tight(tri, topt);
    CHECK(tight.eligible_words() == std::vector<int32_t>{kA, kB, kC});
    Rng r(2);
    try {
      tight.sample(r);
      CHECK(false);
    } catch (const metalm::Error& e) {
      CHECK(e.kind() == metalm::ErrorKind::episode);
    }
  }
}

TEST_CASE("sampler rejects unusable configurations") {
  auto corpus = fixture_corpus();
  auto opt = fixture_options();
  opt.n_way = 1;
  CHECK_THROWS_AS(EpisodeSampler(corpus, opt), metalm::Error);
  opt = fixture_options();
  opt.example_len = 7;
  CHECK_THROWS_AS(EpisodeSampler(corpus, opt), metalm::Error);
  PretokenizedCorpus empty;
  empty.seq_len = 4;
  CHECK_THROWS_AS(EpisodeSampler(empty, fixture_options()), metalm::Error);
}

TEST_CASE("episodes draw from a generated corpus end to end") {
  metalm::SyntheticCorpusOptions copt;
  copt.n_sequences = 120;
  copt.seq_len = 33;
  copt.seed = 3;
  auto sc = metalm::gen_synthetic_corpus(copt);
  EpisodeSamplerOptions opt;
  opt.n_way = 4;
  opt.k_shot = 2;
  opt.n_query = 2;
  EpisodeSampler sampler(sc.corpus, opt);
  CHECK(sampler.eligible_words().size() > 20);
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Episode ep = sampler.sample(rng);
    CHECK(ep.support.size() == 8);
    CHECK(ep.query.size() == 8);
    for (const auto& ex : ep.query) CHECK(!ex.masked_positions.empty());
  }
}
