#include "metalm/ner_data.hpp"

#include <fstream>
#include <sstream>

#include "metalm/errors.hpp"

namespace metalm {

const std::array<std::string, TagScheme::kCount>& TagScheme::labels() {
  static const std::array<std::string, kCount> kLabels = {
      "O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG"};
  return kLabels;
}

const std::array<std::string, 3>& TagScheme::entity_names() {
  static const std::array<std::string, 3> kNames = {"PER", "LOC", "ORG"};
  return kNames;
}

int TagScheme::index_of(std::string_view label) {
  const auto& all = labels();
  for (int i = 0; i < kCount; ++i)
    if (all[static_cast<size_t>(i)] == label) return i;
  fail(ErrorKind::parse, "unknown tag '" + std::string(label) + "'");
}

const std::string& TagScheme::label(int id) {
  require(id >= 0 && id < kCount, ErrorKind::parse, "tag id " + std::to_string(id) + " out of range");
  return labels()[static_cast<size_t>(id)];
}

bool TagScheme::sequence_valid(std::span<const int> tags) {
  if (tags.empty()) return true;
  if (!valid_start(tags[0])) return false;
  for (size_t i = 1; i < tags.size(); ++i)
    if (!valid_transition(tags[i - 1], tags[i])) return false;
  return true;
}

int64_t NerDataset::token_count() const {
  int64_t n = 0;
  for (const auto& s : sentences) n += static_cast<int64_t>(s.words.size());
  return n;
}

int64_t NerDataset::span_count() const {
  int64_t n = 0;
  for (const auto& s : sentences)
    for (size_t i = 0; i < s.tags.size(); ++i) {
      int t = s.tags[i];
      if (TagScheme::is_begin(t)) ++n;
      // Orphan inside tags count as span starts under lenient reading.
      if (TagScheme::is_inside(t) &&
          (i == 0 || TagScheme::entity_type(s.tags[i - 1]) != TagScheme::entity_type(t)))
        ++n;
    }
  return n;
}

NerDataset load_conll(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open '" + path.string() + "'");
  NerDataset data;
  data.id = path.stem().string();
  TaggedSentence cur;
  std::string line;
  int64_t line_no = 0;
  auto flush = [&]() {
    if (!cur.words.empty()) {
      data.sentences.push_back(std::move(cur));
      cur = TaggedSentence{};
    }
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    auto tab = line.find('\t');
    require(tab != std::string::npos, ErrorKind::parse,
            path.string() + ":" + std::to_string(line_no) + ": expected token<TAB>tag");
    std::string word = line.substr(0, tab);
    std::string tag = line.substr(tab + 1);
    require(!word.empty(), ErrorKind::parse,
            path.string() + ":" + std::to_string(line_no) + ": empty token");
    require(tag.find('\t') == std::string::npos, ErrorKind::parse,
            path.string() + ":" + std::to_string(line_no) + ": more than one tab");
    int tag_id;
    try {
      tag_id = TagScheme::index_of(tag);
    } catch (const Error&) {
      fail(ErrorKind::parse,
           path.string() + ":" + std::to_string(line_no) + ": unknown tag '" + tag + "'");
    }
    cur.words.push_back(std::move(word));
    cur.tags.push_back(tag_id);
  }
  flush();
  require(!data.sentences.empty(), ErrorKind::data, path.string() + ": no sentences");
  return data;
}

void save_conll(const std::filesystem::path& path, const NerDataset& data) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::io, "cannot write '" + path.string() + "'");
  for (size_t s = 0; s < data.sentences.size(); ++s) {
    const auto& sent = data.sentences[s];
    require(sent.words.size() == sent.tags.size(), ErrorKind::data,
            "sentence " + std::to_string(s) + ": words/tags length mismatch");
    for (size_t i = 0; i < sent.words.size(); ++i)
      out << sent.words[i] << '\t' << TagScheme::label(sent.tags[i]) << '\n';
    out << '\n';
  }
  require(out.good(), ErrorKind::io, "write failed for '" + path.string() + "'");
}

}  // namespace metalm
