#include "metalm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "metalm/errors.hpp"

namespace metalm {

namespace {

const char* kUnkWord = "<unk>";
const char* kMaskWord = "<mask>";
const char* kPadWord = "<pad>";

std::vector<std::string> numbered(const char* prefix, int n) {
  std::vector<std::string> out;
  out.reserve(static_cast<size_t>(n));
  char buf[32];
  for (int i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof(buf), "%s%02d", prefix, i);
    out.emplace_back(buf);
  }
  return out;
}

}  // namespace

Vocab Vocab::from_words(std::vector<std::string> words) {
  require(words.size() >= kReserved, ErrorKind::data, "vocab must include the reserved entries");
  require(words[0] == kUnkWord && words[1] == kMaskWord && words[2] == kPadWord, ErrorKind::data,
          "vocab must start with <unk>, <mask>, <pad>");
  Vocab v;
  v.words = std::move(words);
  for (size_t i = 0; i < v.words.size(); ++i) {
    auto [it, inserted] = v.index.emplace(v.words[i], static_cast<int32_t>(i));
    require(inserted, ErrorKind::data, "duplicate vocab entry '" + v.words[i] + "'");
  }
  return v;
}

Vocab Vocab::load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, path.string() + ": " + e.what());
  }
  require(j.is_array(), ErrorKind::parse, path.string() + ": vocab must be a JSON array");
  std::vector<std::string> words;
  words.reserve(j.size());
  for (const auto& item : j) {
    require(item.is_string(), ErrorKind::parse, path.string() + ": vocab entries must be strings");
    words.push_back(item.get<std::string>());
  }
  return from_words(std::move(words));
}

void Vocab::save_json(const std::filesystem::path& path) const {
  std::ofstream out(path);
  require(out.good(), ErrorKind::io, "cannot write '" + path.string() + "'");
  nlohmann::json j = words;
  out << j.dump() << '\n';
  require(out.good(), ErrorKind::io, "write failed for '" + path.string() + "'");
}

int32_t Vocab::id_of(const std::string& w) const {
  auto it = index.find(w);
  return it == index.end() ? kUnk : it->second;
}

const std::string& Vocab::word_of(int32_t id) const {
  require(id >= 0 && id < size(), ErrorKind::vocab,
          "token id " + std::to_string(id) + " out of range [0," + std::to_string(size()) + ")");
  return words[static_cast<size_t>(id)];
}

std::vector<int32_t> Vocab::encode(const std::vector<std::string>& text) const {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (const auto& w : text) ids.push_back(id_of(w));
  return ids;
}

Vocab build_vocab(const std::vector<std::vector<std::string>>& texts, int64_t max_size) {
  require(max_size >= Vocab::kReserved, ErrorKind::config,
          "vocab size must be at least " + std::to_string(Vocab::kReserved));
  std::map<std::string, int64_t> counts;
  for (const auto& text : texts)
    for (const auto& w : text) {
      if (w == kUnkWord || w == kMaskWord || w == kPadWord) continue;
      ++counts[w];
    }
  std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> words{kUnkWord, kMaskWord, kPadWord};
  for (const auto& [w, c] : ranked) {
    if (static_cast<int64_t>(words.size()) >= max_size) break;
    words.push_back(w);
  }
  return Vocab::from_words(std::move(words));
}

PretokenizedCorpus load_pretokenized(const std::filesystem::path& path, int64_t expected_len,
                                     int64_t vocab_size) {
  require(expected_len > 0, ErrorKind::config, "expected sequence length must be positive");
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open '" + path.string() + "'");
  PretokenizedCorpus corpus;
  corpus.seq_len = expected_len;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    require(j.is_object() && j.contains("ids") && j["ids"].is_array(), ErrorKind::data,
            path.string() + ":" + std::to_string(line_no) + ": expected {\"ids\": [...]}");
    const auto& ids_json = j["ids"];
    require(static_cast<int64_t>(ids_json.size()) == expected_len, ErrorKind::data,
            path.string() + ":" + std::to_string(line_no) + ": row has " +
                std::to_string(ids_json.size()) + " ids, expected " + std::to_string(expected_len));
    std::vector<int32_t> ids;
    ids.reserve(ids_json.size());
    for (const auto& v : ids_json) {
      require(v.is_number_integer(), ErrorKind::data,
              path.string() + ":" + std::to_string(line_no) + ": non-integer id");
      int64_t id = v.get<int64_t>();
      require(id >= 0 && id < vocab_size, ErrorKind::data,
              path.string() + ":" + std::to_string(line_no) + ": id " + std::to_string(id) +
                  " outside vocabulary of size " + std::to_string(vocab_size));
      ids.push_back(static_cast<int32_t>(id));
    }
    corpus.sequences.push_back(std::move(ids));
  }
  require(!corpus.sequences.empty(), ErrorKind::data, path.string() + ": no sequences");
  return corpus;
}

void save_pretokenized(const std::filesystem::path& path, const PretokenizedCorpus& corpus) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::io, "cannot write '" + path.string() + "'");
  for (const auto& seq : corpus.sequences) {
    nlohmann::json j;
    j["ids"] = seq;
    out << j.dump() << '\n';
  }
  require(out.good(), ErrorKind::io, "write failed for '" + path.string() + "'");
}

std::vector<std::vector<int32_t>> sample_lm_batch(const PretokenizedCorpus& corpus, int64_t n,
                                                  Rng& rng) {
  require(n > 0, ErrorKind::config, "batch size must be positive");
  require(corpus.size() > 0, ErrorKind::data, "cannot sample from an empty corpus");
  std::vector<std::vector<int32_t>> batch;
  batch.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    batch.push_back(corpus.sequences[static_cast<size_t>(rng.uniform_int(corpus.size()))]);
  return batch;
}

// --- synthetic language -----------------------------------------------------

const SharedLexicon& shared_lexicon() {
  static const SharedLexicon lex = [] {
    SharedLexicon l;
    l.particles = {"si", "ni"};
    l.oblique = "sa";
    l.determiner = "ang";
    l.verbs = numbered("vb", 10);
    l.base_names = numbered("na", 20);
    l.extra_names = numbered("nx", 12);
    l.dialect_names = numbered("nd", 16);
    l.places = numbered("pl", 10);
    l.org_heads = numbered("og", 6);
    l.org_tails = numbered("ct", 6);
    l.dialect_org_heads = numbered("od", 4);
    l.dialect_org_tails = numbered("cd", 4);
    l.fillers.reserve(160);
    char buf[16];
    for (int i = 0; i < 160; ++i) {
      std::snprintf(buf, sizeof(buf), "wf%03d", i);
      l.fillers.emplace_back(buf);
    }
    return l;
  }();
  return lex;
}

namespace {

const std::string& pick(const std::vector<std::string>& pool, Rng& rng) {
  return pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))];
}

// Zipf(1.1) unigram draw over the filler pool.
class ZipfSampler {
 public:
  explicit ZipfSampler(size_t n) : cum_(n) {
    double acc = 0;
    for (size_t i = 0; i < n; ++i) {
      acc += 1.0 / std::pow(static_cast<double>(i + 1), 1.1);
      cum_[i] = acc;
    }
    total_ = acc;
  }
  size_t draw(Rng& rng) const {
    double u = rng.uniform() * total_;
    auto it = std::lower_bound(cum_.begin(), cum_.end(), u);
    return it == cum_.end() ? cum_.size() - 1 : static_cast<size_t>(it - cum_.begin());
  }

 private:
  std::vector<double> cum_;
  double total_ = 0;
};

// Appends a filler run with Zipf unigrams, a deterministic bigram successor
// rule, and occasional open-class words used in non-entity senses.
void append_filler_run(std::vector<std::string>& out, int64_t len, const ZipfSampler& zipf,
                       Rng& rng, bool polysemy) {
  const auto& lex = shared_lexicon();
  size_t n = lex.fillers.size();
  size_t prev = zipf.draw(rng);
  for (int64_t i = 0; i < len; ++i) {
    if (polysemy && rng.bernoulli(0.10)) {
      double r = rng.uniform();
      if (r < 0.5)
        out.push_back(pick(lex.verbs, rng));
      else if (r < 0.75)
        out.push_back(pick(lex.org_heads, rng));
      else
        out.push_back(pick(lex.org_tails, rng));
      continue;
    }
    size_t cur = (i > 0 && rng.bernoulli(0.55)) ? (prev * 7 + 3) % n : zipf.draw(rng);
    out.push_back(lex.fillers[cur]);
    prev = cur;
  }
}

}  // namespace

SyntheticCorpus gen_synthetic_corpus(const SyntheticCorpusOptions& opt) {
  require(opt.vocab_size >= 64, ErrorKind::config,
          "synthetic corpus needs a vocab of at least 64");
  require(opt.n_sequences > 0 && opt.seq_len >= 2, ErrorKind::config,
          "synthetic corpus sizes must be positive (seq_len >= 2)");
  const auto& lex = shared_lexicon();
  Rng rng(mix_seed(opt.seed, 0xC0));
  ZipfSampler zipf(lex.fillers.size());

  int64_t want = opt.n_sequences * opt.seq_len;
  std::vector<std::string> stream;
  stream.reserve(static_cast<size_t>(want) + 16);
  while (static_cast<int64_t>(stream.size()) < want) {
    double r = rng.uniform();
    if (r < 0.32) {
      stream.push_back(pick(lex.verbs, rng));
      if (rng.bernoulli(0.8)) stream.push_back(pick(lex.particles, rng));
      stream.push_back(pick(lex.base_names, rng));
      if (rng.bernoulli(0.5)) {
        stream.push_back(lex.oblique);
        stream.push_back(pick(lex.places, rng));
      }
    } else if (r < 0.40) {
      stream.push_back(pick(lex.verbs, rng));
      stream.push_back(lex.oblique);
      stream.push_back(pick(lex.places, rng));
    } else if (r < 0.48) {
      stream.push_back(lex.determiner);
      stream.push_back(pick(lex.org_heads, rng));
      stream.push_back(pick(lex.org_tails, rng));
      stream.push_back(pick(lex.verbs, rng));
    } else {
      append_filler_run(stream, 3 + rng.uniform_int(6), zipf, rng, true);
    }
  }
  stream.resize(static_cast<size_t>(want));

  auto vocab = build_vocab({stream}, opt.vocab_size);
  auto ids = vocab.encode(stream);

  SyntheticCorpus out;
  out.vocab = std::move(vocab);
  out.corpus.seq_len = opt.seq_len;
  out.corpus.sequences.reserve(static_cast<size_t>(opt.n_sequences));
  for (int64_t s = 0; s < opt.n_sequences; ++s) {
    auto begin = ids.begin() + s * opt.seq_len;
    out.corpus.sequences.emplace_back(begin, begin + opt.seq_len);
  }
  return out;
}

NerDataset gen_synthetic_ner(const SyntheticNerOptions& opt) {
  require(opt.n_sentences > 0, ErrorKind::config, "n_sentences must be positive");
  require(opt.particle_rate >= 0.0 && opt.particle_rate <= 1.0, ErrorKind::config,
          "particle_rate must lie in [0,1]");
  require(opt.org_anchor_rate >= 0.0 && opt.org_anchor_rate <= 1.0, ErrorKind::config,
          "org_anchor_rate must lie in [0,1]");
  require(opt.oov_name_rate >= 0.0 && opt.oov_name_rate <= 1.0, ErrorKind::config,
          "oov_name_rate must lie in [0,1]");
  const auto& lex = shared_lexicon();
  Rng rng(mix_seed(opt.seed, 0xE5));
  ZipfSampler zipf(lex.fillers.size());

  auto name_slot = [&]() -> const std::string& {
    if (opt.dialect) return pick(lex.dialect_names, rng);
    if (rng.bernoulli(opt.oov_name_rate)) return pick(lex.extra_names, rng);
    return pick(lex.base_names, rng);
  };

  NerDataset data;
  data.id = opt.dataset_id;
  data.sentences.reserve(static_cast<size_t>(opt.n_sentences));
  for (int64_t s = 0; s < opt.n_sentences; ++s) {
    TaggedSentence sent;
    auto emit = [&](const std::string& w, int tag) {
      sent.words.push_back(w);
      sent.tags.push_back(tag);
    };
    auto emit_fillers = [&](int64_t len) {
      std::vector<std::string> run;
      append_filler_run(run, len, zipf, rng, false);
      for (auto& w : run) emit(w, TagScheme::kO);
    };

    double r = rng.uniform();
    if (r < 0.55) {
      emit(pick(lex.verbs, rng), TagScheme::kO);
      if (rng.bernoulli(opt.particle_rate)) emit(pick(lex.particles, rng), TagScheme::kO);
      emit(name_slot(), TagScheme::begin_tag(0));
      if (rng.bernoulli(0.7)) {
        emit(lex.oblique, TagScheme::kO);
        emit(pick(lex.places, rng), TagScheme::begin_tag(1));
      }
      if (rng.bernoulli(0.5)) emit_fillers(1 + rng.uniform_int(2));
    } else if (r < 0.67) {
      emit(pick(lex.verbs, rng), TagScheme::kO);
      emit(lex.oblique, TagScheme::kO);
      emit(pick(lex.places, rng), TagScheme::begin_tag(1));
      if (rng.bernoulli(0.5)) emit_fillers(1 + rng.uniform_int(2));
    } else if (r < 0.75) {
      if (rng.bernoulli(opt.org_anchor_rate)) emit(lex.determiner, TagScheme::kO);
      if (opt.dialect) {
        emit(pick(lex.dialect_org_heads, rng), TagScheme::begin_tag(2));
        emit(pick(lex.dialect_org_tails, rng), TagScheme::inside_tag(2));
      } else {
        emit(pick(lex.org_heads, rng), TagScheme::begin_tag(2));
        emit(pick(lex.org_tails, rng), TagScheme::inside_tag(2));
      }
      emit(pick(lex.verbs, rng), TagScheme::kO);
    } else {
      emit_fillers(3 + rng.uniform_int(4));
      if (rng.bernoulli(0.3)) emit(pick(lex.org_heads, rng), TagScheme::kO);
      if (rng.bernoulli(0.3)) emit(pick(lex.verbs, rng), TagScheme::kO);
    }
    data.sentences.push_back(std::move(sent));
  }
  return data;
}

}  // namespace metalm
