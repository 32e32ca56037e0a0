#pragma once

// Student -> teacher alignments over hidden-grid rows. Columns are never
// remapped: a student cell (i, j) aligns with teacher cells (k, j).

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cdistill/error.hpp"
#include "cdistill/rng.hpp"

namespace cdistill {

enum class AlignmentScheme { kFull, kMiddle, kLate };

enum class SelectionStrategy { kConsecutive, kRandom, kMasked };

inline std::string to_string(AlignmentScheme s) {
  switch (s) {
    case AlignmentScheme::kFull: return "full";
    case AlignmentScheme::kMiddle: return "middle";
    case AlignmentScheme::kLate: return "late";
  }
  return "?";
}

inline AlignmentScheme parse_alignment_scheme(std::string_view s) {
  if (s == "full") return AlignmentScheme::kFull;
  if (s == "middle") return AlignmentScheme::kMiddle;
  if (s == "late") return AlignmentScheme::kLate;
  throw ConfigError("unknown alignment scheme '" + std::string(s) + "' (expected full|middle|late)");
}

inline std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::kConsecutive: return "consecutive";
    case SelectionStrategy::kRandom: return "random";
    case SelectionStrategy::kMasked: return "masked";
  }
  return "?";
}

inline SelectionStrategy parse_selection_strategy(std::string_view s) {
  if (s == "consecutive") return SelectionStrategy::kConsecutive;
  if (s == "random") return SelectionStrategy::kRandom;
  if (s == "masked") return SelectionStrategy::kMasked;
  throw ConfigError("unknown token selection '" + std::string(s) + "' (expected consecutive|random|masked)");
}

struct TokenSelection {
  SelectionStrategy strategy = SelectionStrategy::kConsecutive;
  double ratio = 0.3;

  void validate() const {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("token selection ratio must lie in (0, 1]");
  }
};

/// Student row -> ordered teacher rows. Rows are 1-based.
struct AlignmentMap {
  std::map<std::size_t, std::vector<std::size_t>> entries;

  bool empty() const noexcept { return entries.empty(); }
  friend bool operator==(const AlignmentMap&, const AlignmentMap&) = default;
};

inline AlignmentMap build_alignment(AlignmentScheme scheme, std::size_t student_layers, std::size_t teacher_layers) {
  const std::string dims = " (student " + std::to_string(student_layers) + ", teacher " + std::to_string(teacher_layers) + ")";
  if (student_layers == 0 || teacher_layers == 0) throw AlignmentError("alignment: layer counts must be positive" + dims);
  AlignmentMap map;
  switch (scheme) {
    case AlignmentScheme::kFull: {
      if (teacher_layers % student_layers != 0) {
        throw AlignmentError("FULL alignment: teacher layers not divisible by student layers" + dims);
      }
      const std::size_t r = teacher_layers / student_layers;
      for (std::size_t i = 1; i <= student_layers; ++i) {
        auto& rows = map.entries[i];
        for (std::size_t k = 1; k <= r; ++k) rows.push_back((i - 1) * r + k);
      }
      break;
    }
    case AlignmentScheme::kMiddle: {
      if (teacher_layers < 2) throw AlignmentError("MIDDLE alignment: teacher needs at least 2 layers" + dims);
      map.entries[std::max<std::size_t>(1, student_layers / 2)] = {teacher_layers / 2};
      break;
    }
    case AlignmentScheme::kLate: {
      if (student_layers < 2) throw AlignmentError("LATE alignment: student needs at least 2 layers" + dims);
      if (teacher_layers < 3) throw AlignmentError("LATE alignment: teacher needs at least 3 layers" + dims);
      map.entries[1] = {teacher_layers - 2};
      map.entries[2] = {teacher_layers - 1};
      break;
    }
  }
  return map;
}

struct AlignmentSite {
  std::size_t student_row = 0;
  std::vector<std::size_t> teacher_rows;
};

/// Uniform choice over the entries of the map.
inline AlignmentSite sample_site(const AlignmentMap& map, Rng& rng) {
  if (map.empty()) throw AlignmentError("sample_site: empty alignment map");
  auto it = map.entries.begin();
  std::advance(it, static_cast<std::ptrdiff_t>(uniform_index(rng, map.entries.size())));
  return {it->first, it->second};
}

/// Column budget for a sequence of `length` usable tokens.
inline std::size_t selection_budget(double ratio, std::size_t length) {
  const auto k = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(length)));
  return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(length, 1));
}

/// Chooses the 1-based token columns to intervene on, among the first
/// `length` (non-padding) columns. `masked_positions` (1-based) feeds the MASKED
/// strategy; when it is empty a single random column is used instead.
inline std::vector<std::size_t> select_columns(const TokenSelection& sel, std::size_t length,
                                               const std::vector<std::size_t>& masked_positions, Rng& rng) {
  sel.validate();
  if (length == 0) length = 1;
  const std::size_t k = selection_budget(sel.ratio, length);
  std::vector<std::size_t> cols;
  switch (sel.strategy) {
    case SelectionStrategy::kConsecutive: {
      const std::size_t start = 1 + uniform_index(rng, length - k + 1);
      for (std::size_t c = start; c < start + k; ++c) cols.push_back(c);
      break;
    }
    case SelectionStrategy::kRandom: {
      std::vector<std::size_t> all(length);
      for (std::size_t i = 0; i < length; ++i) all[i] = i + 1;
      for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + uniform_index(rng, length - i)]);
      cols.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
      break;
    }
    case SelectionStrategy::kMasked: {
      std::vector<std::size_t> pool;
      for (auto c : masked_positions)
        if (c >= 1 && c <= length) pool.push_back(c);
      std::sort(pool.begin(), pool.end());
      pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
      if (pool.empty()) {
        cols.push_back(1 + uniform_index(rng, length));
      } else if (pool.size() <= k) {
        cols = std::move(pool);
      } else {
        for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
        cols.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
      }
      break;
    }
  }
  std::sort(cols.begin(), cols.end());
  return cols;
}

}  // namespace cdistill
