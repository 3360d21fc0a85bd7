#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "metalm/tags.hpp"

namespace metalm {

struct TaggedSentence {
  std::vector<std::string> words;
  std::vector<int> tags;  // TagScheme ids
};

struct NerDataset {
  std::string id;
  std::vector<TaggedSentence> sentences;

  int64_t token_count() const;
  int64_t span_count() const;
};

// Tab-separated "token<TAB>tag" lines, blank line between sentences. Tags must
// belong to the scheme; parse errors carry 1-based line numbers.
NerDataset load_conll(const std::filesystem::path& path);
void save_conll(const std::filesystem::path& path, const NerDataset& data);

}  // namespace metalm
