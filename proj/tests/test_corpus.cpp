#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "metalm/corpus.hpp"
#include "metalm/errors.hpp"

using metalm::Rng;
using metalm::TagScheme;
using metalm::Vocab;

namespace {

std::filesystem::path temp_file(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / "metalm_corpus_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("vocab building ranks by frequency then lexicographically") {
  std::vector<std::vector<std::string>> texts = {
      {"b", "a", "c", "b"}, {"a", "b", "a", "c", "b"}};
  // counts: a=3, b=4, c=2
  auto v = metalm::build_vocab(texts, 64);
  CHECK(v.words[0] == "<unk>");
  CHECK(v.words[1] == "<mask>");
  CHECK(v.words[2] == "<pad>");
  CHECK(v.words[3] == "b");
  CHECK(v.words[4] == "a");
  CHECK(v.words[5] == "c");
  CHECK(v.size() == 6);

  std::vector<std::vector<std::string>> tied = {{"z", "y", "z", "y"}};
  auto vt = metalm::build_vocab(tied, 64);
  CHECK(vt.words[3] == "y");
  CHECK(vt.words[4] == "z");

  auto truncated = metalm::build_vocab(texts, 4);
  CHECK(truncated.size() == 4);
  CHECK(truncated.words[3] == "b");
}

TEST_CASE("vocab rejects malformed word lists and maps unknowns to <unk>") {
  CHECK_THROWS_AS(Vocab::from_words({"a", "b", "c"}), metalm::Error);
  CHECK_THROWS_AS(Vocab::from_words({"<unk>", "<mask>", "<pad>", "a", "a"}), metalm::Error);
  auto v = Vocab::from_words({"<unk>", "<mask>", "<pad>", "hello"});
  CHECK(v.id_of("hello") == 3);
  CHECK(v.id_of("absent") == Vocab::kUnk);
  auto ids = v.encode({"hello", "absent", "<mask>"});
  CHECK(ids == std::vector<int32_t>{3, 0, 1});
  CHECK_THROWS_AS(v.word_of(99), metalm::Error);
}

TEST_CASE("vocab json round trip") {
  auto v = Vocab::from_words({"<unk>", "<mask>", "<pad>", "alpha", "beta"});
  auto path = temp_file("vocab.json");
  v.save_json(path);
  auto w = Vocab::load_json(path);
  CHECK(w.words == v.words);
}

TEST_CASE("pretokenized corpus round trip and validation") {
  metalm::PretokenizedCorpus corpus;
  corpus.seq_len = 4;
  corpus.sequences = {{0, 1, 2, 3}, {3, 2, 1, 0}};
  auto path = temp_file("corpus.jsonl");
  metalm::save_pretokenized(path, corpus);
  auto loaded = metalm::load_pretokenized(path, 4, 8);
  CHECK(loaded.sequences == corpus.sequences);

  SUBCASE("ragged rows are rejected with a line number") {
    std::ofstream out(path);
    out << R"({"ids":[0,1,2,3]})" << "\n" << R"({"ids":[0,1]})" << "\n";
    out.close();
    try {
      metalm::load_pretokenized(path, 4, 8);
      CHECK(false);
    } catch (const metalm::Error& e) {
      CHECK(e.kind() == metalm::ErrorKind::data);
      CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }
  }
  SUBCASE("out-of-range ids are rejected") {
    std::ofstream out(path);
    out << R"({"ids":[0,1,2,9]})" << "\n";
    out.close();
    CHECK_THROWS_AS(metalm::load_pretokenized(path, 4, 8), metalm::Error);
  }
  SUBCASE("garbage lines are parse errors") {
    std::ofstream out(path);
    out << "not json\n";
    out.close();
    try {
      metalm::load_pretokenized(path, 4, 8);
      CHECK(false);
    } catch (const metalm::Error& e) {
      CHECK(e.kind() == metalm::ErrorKind::parse);
    }
  }
}

TEST_CASE("lm batch sampling is deterministic and roughly uniform") {
  metalm::PretokenizedCorpus corpus;
  corpus.seq_len = 2;
  for (int32_t i = 0; i < 10; ++i) corpus.sequences.push_back({i, i});

  Rng a(3), b(3);
  auto batch_a = metalm::sample_lm_batch(corpus, 6, a);
  auto batch_b = metalm::sample_lm_batch(corpus, 6, b);
  CHECK(batch_a == batch_b);
  CHECK(batch_a.size() == 6);

  Rng r(12);
  std::vector<int> counts(10, 0);
  constexpr int kDraws = 10000;
  for (int i = 0; i < kDraws; ++i) {
    auto one = metalm::sample_lm_batch(corpus, 1, r);
    counts[static_cast<size_t>(one[0][0])]++;
  }
  double expect = kDraws / 10.0;
  double sigma = std::sqrt(expect * 0.9);
  for (int c : counts) CHECK(std::abs(c - expect) < 5.0 * sigma);
}

TEST_CASE("synthetic corpus is deterministic and well-formed") {
  metalm::SyntheticCorpusOptions opt;
  opt.vocab_size = 256;
  opt.n_sequences = 50;
  opt.seq_len = 33;
  opt.seed = 9;
  auto a = metalm::gen_synthetic_corpus(opt);
  auto b = metalm::gen_synthetic_corpus(opt);
  CHECK(a.vocab.words == b.vocab.words);
  CHECK(a.corpus.sequences == b.corpus.sequences);
  CHECK(a.corpus.size() == 50);
  for (const auto& seq : a.corpus.sequences) {
    CHECK(static_cast<int64_t>(seq.size()) == 33);
    for (int32_t id : seq) {
      CHECK(id >= 0);
      CHECK(id < a.vocab.size());
    }
  }
  opt.seed = 10;
  auto c = metalm::gen_synthetic_corpus(opt);
  CHECK(a.corpus.sequences != c.corpus.sequences);
}

TEST_CASE("synthetic corpus covers the anchor words and excludes eval pools") {
  metalm::SyntheticCorpusOptions opt;
  opt.n_sequences = 200;
  opt.seed = 4;
  auto sc = metalm::gen_synthetic_corpus(opt);
  const auto& lex = metalm::shared_lexicon();
  for (const std::string& w : {std::string("si"), std::string("ni"), lex.oblique, lex.determiner})
    CHECK(sc.vocab.id_of(w) != Vocab::kUnk);
  for (const auto& n : lex.base_names) CHECK(sc.vocab.id_of(n) != Vocab::kUnk);
  for (const auto& n : lex.dialect_names) CHECK(sc.vocab.id_of(n) == Vocab::kUnk);
  for (const auto& n : lex.extra_names) CHECK(sc.vocab.id_of(n) == Vocab::kUnk);
  for (const auto& n : lex.dialect_org_heads) CHECK(sc.vocab.id_of(n) == Vocab::kUnk);
}

TEST_CASE("synthetic corpus keeps the oblique-place bigram predictable") {
  metalm::SyntheticCorpusOptions opt;
  opt.n_sequences = 200;
  opt.seed = 21;
  auto sc = metalm::gen_synthetic_corpus(opt);
  int32_t sa = sc.vocab.id_of("sa");
  std::set<int32_t> place_ids;
  for (const auto& p : metalm::shared_lexicon().places) place_ids.insert(sc.vocab.id_of(p));
  int64_t total = 0, hits = 0;
  for (const auto& seq : sc.corpus.sequences)
    for (size_t i = 0; i + 1 < seq.size(); ++i)
      if (seq[i] == sa) {
        ++total;
        hits += place_ids.count(seq[i + 1]) ? 1 : 0;
      }
  CHECK(total > 50);
  CHECK(static_cast<double>(hits) / static_cast<double>(total) > 0.9);
}

TEST_CASE("tag scheme round trips and enforces the transition rules") {
  for (int i = 0; i < TagScheme::kCount; ++i) CHECK(TagScheme::index_of(TagScheme::label(i)) == i);
  CHECK_THROWS_AS(TagScheme::index_of("B-MISC"), metalm::Error);

  CHECK(TagScheme::valid_transition(TagScheme::index_of("B-PER"), TagScheme::index_of("I-PER")));
  CHECK(TagScheme::valid_transition(TagScheme::index_of("I-LOC"), TagScheme::index_of("I-LOC")));
  CHECK(!TagScheme::valid_transition(TagScheme::kO, TagScheme::index_of("I-PER")));
  CHECK(!TagScheme::valid_transition(TagScheme::index_of("B-PER"), TagScheme::index_of("I-LOC")));
  CHECK(TagScheme::valid_transition(TagScheme::index_of("I-ORG"), TagScheme::kO));

  std::vector<int> ok{0, 1, 2, 0, 3};
  CHECK(TagScheme::sequence_valid(ok));
  std::vector<int> bad{0, 2};
  CHECK(!TagScheme::sequence_valid(bad));
  std::vector<int> bad_start{2, 0};
  CHECK(!TagScheme::sequence_valid(bad_start));
}

TEST_CASE("conll files round trip and report parse errors with line numbers") {
  metalm::NerDataset data;
  data.id = "sample";
  data.sentences.push_back(
      {{"vb01", "si", "na03", "sa", "pl02"}, {0, 0, 1, 0, 3}});
  data.sentences.push_back({{"wf001"}, {0}});
  auto path = temp_file("sample.conll");
  metalm::save_conll(path, data);
  auto loaded = metalm::load_conll(path);
  CHECK(loaded.sentences.size() == 2);
  CHECK(loaded.sentences[0].words == data.sentences[0].words);
  CHECK(loaded.sentences[0].tags == data.sentences[0].tags);
  CHECK(loaded.id == "sample");

  SUBCASE("unknown tags carry line numbers") {
    std::ofstream out(path);
    out << "tok\tO\n" << "tok\tB-MISC\n";
    out.close();
    try {
      metalm::load_conll(path);
      CHECK(false);
    } catch (const metalm::Error& e) {
      CHECK(e.kind() == metalm::ErrorKind::parse);
      CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }
  }
  SUBCASE("missing tabs are rejected") {
    std::ofstream out(path);
    out << "loneword\n";
    out.close();
    CHECK_THROWS_AS(metalm::load_conll(path), metalm::Error);
  }
  SUBCASE("empty files are data errors") {
    std::ofstream out(path);
    out.close();
    CHECK_THROWS_AS(metalm::load_conll(path), metalm::Error);
  }
}

TEST_CASE("synthetic tagging data is IOB2-valid across seeds") {
  for (uint64_t seed : {0ULL, 1ULL, 2ULL, 3ULL, 4ULL}) {
    metalm::SyntheticNerOptions opt;
    opt.n_sentences = 100;
    opt.particle_rate = 0.5;
    opt.org_anchor_rate = 0.5;
    opt.seed = seed;
    auto data = metalm::gen_synthetic_ner(opt);
    CHECK(data.sentences.size() == 100);
    for (const auto& s : data.sentences) {
      REQUIRE(s.words.size() == s.tags.size());
      CHECK(TagScheme::sequence_valid(s.tags));
    }
  }
}

TEST_CASE("particle rate controls how many person mentions are anchored") {
  auto anchored_fraction = [](double rate, uint64_t seed) {
    metalm::SyntheticNerOptions opt;
    opt.n_sentences = 400;
    opt.particle_rate = rate;
    opt.seed = seed;
    auto data = metalm::gen_synthetic_ner(opt);
    int64_t per = 0, anchored = 0;
    for (const auto& s : data.sentences)
      for (size_t i = 0; i < s.tags.size(); ++i)
        if (s.tags[i] == TagScheme::begin_tag(0)) {
          ++per;
          if (i > 0 && (s.words[i - 1] == "si" || s.words[i - 1] == "ni")) ++anchored;
        }
    REQUIRE(per > 0);
    return static_cast<double>(anchored) / static_cast<double>(per);
  };
  CHECK(anchored_fraction(1.0, 5) == 1.0);
  CHECK(anchored_fraction(0.0, 6) == 0.0);
  double mid = anchored_fraction(0.5, 7);
  CHECK(mid > 0.35);
  CHECK(mid < 0.65);
}

TEST_CASE("dialect data swaps every entity into the disjoint pools") {
  metalm::SyntheticNerOptions opt;
  opt.n_sentences = 300;
  opt.particle_rate = 0.5;
  opt.org_anchor_rate = 0.2;
  opt.dialect = true;
  opt.seed = 11;
  auto data = metalm::gen_synthetic_ner(opt);
  bool saw_per = false, saw_org = false;
  for (const auto& s : data.sentences)
    for (size_t i = 0; i < s.tags.size(); ++i) {
      if (s.tags[i] == TagScheme::begin_tag(0)) {
        saw_per = true;
        CHECK(s.words[i].substr(0, 2) == "nd");
      }
      if (s.tags[i] == TagScheme::begin_tag(2)) {
        saw_org = true;
        CHECK(s.words[i].substr(0, 2) == "od");
      }
      if (s.tags[i] == TagScheme::inside_tag(2)) CHECK(s.words[i].substr(0, 2) == "cd");
    }
  CHECK(saw_per);
  CHECK(saw_org);
}

TEST_CASE("synthetic tagging data is reproducible by seed") {
  metalm::SyntheticNerOptions opt;
  opt.n_sentences = 50;
  opt.seed = 33;
  auto a = metalm::gen_synthetic_ner(opt);
  auto b = metalm::gen_synthetic_ner(opt);
  REQUIRE(a.sentences.size() == b.sentences.size());
  for (size_t i = 0; i < a.sentences.size(); ++i) {
    CHECK(a.sentences[i].words == b.sentences[i].words);
    CHECK(a.sentences[i].tags == b.sentences[i].tags);
  }
}
