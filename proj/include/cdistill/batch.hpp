#pragma once

#include <cstdint>
#include <vector>

#include "cdistill/error.hpp"

namespace cdistill {

inline constexpr std::int32_t kIgnoreLabel = -1;

/// A batch of fixed-length sequences packed row-major as [batch, seq].
struct MaskedBatch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> input_ids;
  std::vector<std::uint8_t> attention_mask;  // 1 real token, 0 padding
  std::vector<std::int32_t> labels;          // original id at masked positions, kIgnoreLabel elsewhere
  std::vector<std::uint8_t> masked_flags;

  std::size_t tokens() const noexcept { return batch_size * seq_len; }

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (auto f : masked_flags) n += f != 0;
    return n;
  }

  /// Number of real tokens in sequence b.
  std::size_t real_length(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < seq_len; ++t) n += attention_mask[b * seq_len + t] != 0;
    return n;
  }

  void validate() const {
    const std::size_t n = tokens();
    if (input_ids.size() != n || attention_mask.size() != n || labels.size() != n || masked_flags.size() != n) {
      throw DataError("masked batch: field lengths do not match batch " + std::to_string(batch_size) + " x seq " +
                      std::to_string(seq_len));
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (masked_flags[i] && !attention_mask[i]) throw DataError("masked batch: masked position outside attention mask");
      if ((labels[i] != kIgnoreLabel) != (masked_flags[i] != 0)) {
        throw DataError("masked batch: labels must be set exactly at masked positions");
      }
    }
  }
};

/// Sequences [begin, end) of a batch.
inline MaskedBatch slice_batch(const MaskedBatch& b, std::size_t begin, std::size_t end) {
  if (begin > end || end > b.batch_size) throw DataError("slice_batch: range outside batch");
  MaskedBatch out;
  out.batch_size = end - begin;
  out.seq_len = b.seq_len;
  const auto lo = static_cast<std::ptrdiff_t>(begin * b.seq_len), hi = static_cast<std::ptrdiff_t>(end * b.seq_len);
  out.input_ids.assign(b.input_ids.begin() + lo, b.input_ids.begin() + hi);
  out.attention_mask.assign(b.attention_mask.begin() + lo, b.attention_mask.begin() + hi);
  out.labels.assign(b.labels.begin() + lo, b.labels.begin() + hi);
  out.masked_flags.assign(b.masked_flags.begin() + lo, b.masked_flags.begin() + hi);
  return out;
}

/// Concatenates batches with equal sequence length.
inline MaskedBatch concat_batches(const std::vector<MaskedBatch>& parts) {
  MaskedBatch out;
  if (parts.empty()) return out;
  out.seq_len = parts.front().seq_len;
  for (const auto& p : parts) {
    if (p.seq_len != out.seq_len) throw DataError("concat_batches: sequence lengths differ");
    out.batch_size += p.batch_size;
    out.input_ids.insert(out.input_ids.end(), p.input_ids.begin(), p.input_ids.end());
    out.attention_mask.insert(out.attention_mask.end(), p.attention_mask.begin(), p.attention_mask.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.masked_flags.insert(out.masked_flags.end(), p.masked_flags.begin(), p.masked_flags.end());
  }
  return out;
}

}  // namespace cdistill
