#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>

namespace metalm {

// IOB2 tagging over three entity types. Tag ids are stable across the
// codebase: O, B-PER, I-PER, B-LOC, I-LOC, B-ORG, I-ORG.
struct TagScheme {
  static constexpr int kO = 0;
  static constexpr int kCount = 7;

  static const std::array<std::string, kCount>& labels();
  static const std::array<std::string, 3>& entity_names();  // PER, LOC, ORG

  static int index_of(std::string_view label);  // parse error on unknown tags
  static const std::string& label(int id);

  static bool is_begin(int id) { return id == 1 || id == 3 || id == 5; }
  static bool is_inside(int id) { return id == 2 || id == 4 || id == 6; }
  // 0=PER, 1=LOC, 2=ORG; -1 for O.
  static int entity_type(int id) { return id == kO ? -1 : (id - 1) / 2; }
  static int begin_tag(int entity) { return 1 + 2 * entity; }
  static int inside_tag(int entity) { return 2 + 2 * entity; }

  // I-X may only follow B-X or I-X of the same type.
  static bool valid_transition(int from, int to) {
    if (!is_inside(to)) return true;
    return (is_begin(from) || is_inside(from)) && entity_type(from) == entity_type(to);
  }
  static bool valid_start(int id) { return !is_inside(id); }
  static bool sequence_valid(std::span<const int> tags);
};

}  // namespace metalm
