#pragma once

// Corpus ingestion: word-level vocabulary, encoding, MLM corruption, batching
// and the paired (base, source) stream used by distillation.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdistill/batch.hpp"
#include "cdistill/error.hpp"
#include "cdistill/rng.hpp"

namespace cdistill {

using TokenIds = std::vector<std::int32_t>;

class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::int32_t kMask = 4;
  static constexpr std::size_t kNumSpecials = 5;

  static const std::array<std::string, kNumSpecials>& specials() {
    static const std::array<std::string, kNumSpecials> names = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    return names;
  }

  Vocab() {
    for (const auto& s : specials()) push(s);
  }

  /// Vocabulary holding the specials followed by `words` in order.
  static Vocab from_words(const std::vector<std::string>& words) {
    Vocab v;
    for (const auto& w : words) {
      if (v.index_.contains(w)) throw DataError("vocab: duplicate token '" + w + "'");
      v.push(w);
    }
    return v;
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }

  std::int32_t id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw DataError("vocab: id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  static bool is_special(std::int32_t id) noexcept { return id >= 0 && id < static_cast<std::int32_t>(kNumSpecials); }

  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  /// One token per line; line index is the id.
  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("vocab: cannot write " + path.string());
    for (const auto& t : tokens_) os << t << '\n';
    if (!os) throw DataError("vocab: write failed for " + path.string());
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("vocab: cannot open " + path.string());
    std::vector<std::string> lines;
    for (std::string line; std::getline(is, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
    if (lines.size() < kNumSpecials) throw DataError("vocab: " + path.string() + " is missing the special tokens");
    for (std::size_t i = 0; i < kNumSpecials; ++i) {
      if (lines[i] != specials()[i]) {
        throw DataError("vocab: " + path.string() + " line " + std::to_string(i + 1) + " should be " + specials()[i]);
      }
    }
    return from_words({lines.begin() + kNumSpecials, lines.end()});
  }

 private:
  void push(const std::string& t) {
    index_.emplace(t, static_cast<std::int32_t>(tokens_.size()));
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

/// Lower-cased words; every ASCII punctuation character is its own token.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      word.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

/// Non-empty lines of a UTF-8 text file (one document per line).
inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("corpus: cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) lines.push_back(std::move(line));
  }
  return lines;
}

/// Frequency-sorted vocabulary (ties broken alphabetically). `max_size` counts
/// the specials; 0 means unlimited.
inline Vocab build_vocab(const std::vector<std::string>& lines, std::size_t min_freq = 1, std::size_t max_size = 0) {
  if (max_size != 0 && max_size < Vocab::kNumSpecials) {
    throw ConfigError("build_vocab: max_size " + std::to_string(max_size) + " cannot hold the special tokens");
  }
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& line : lines)
    for (auto& tok : tokenize(line)) ++counts[tok];
  for (const auto& s : Vocab::specials()) counts.erase(s);
  if (counts.empty()) throw DataError("build_vocab: corpus contains no tokens");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> words;
  for (const auto& [tok, n] : ranked) {
    if (n < min_freq) break;
    if (max_size != 0 && words.size() + Vocab::kNumSpecials >= max_size) break;
    words.push_back(tok);
  }
  return Vocab::from_words(words);
}

inline Vocab build_vocab(const std::filesystem::path& corpus, std::size_t min_freq = 1, std::size_t max_size = 0) {
  return build_vocab(read_lines(corpus), min_freq, max_size);
}

/// [CLS] tokens [SEP], truncated so the result fits max_seq_len (>= 2).
inline TokenIds encode(std::string_view text, const Vocab& vocab, std::size_t max_seq_len) {
  if (max_seq_len < 2) throw ConfigError("encode: max_seq_len must be at least 2");
  TokenIds ids{Vocab::kCls};
  for (const auto& tok : tokenize(text)) {
    if (ids.size() + 1 >= max_seq_len) break;
    ids.push_back(vocab.id(tok));
  }
  ids.push_back(Vocab::kSep);
  return ids;
}

/// Space-joined tokens, specials other than [UNK] and [MASK] dropped.
inline std::string decode(const TokenIds& ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids) {
    if (id == Vocab::kPad || id == Vocab::kCls || id == Vocab::kSep) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

struct MaskingRule {
  double mask_prob = 0.15;
  double replace_with_mask = 0.8;    // fraction of masked positions shown as [MASK]
  double replace_with_random = 0.1;  // fraction replaced by a random non-special token
};

struct MaskedSequence {
  TokenIds input_ids;
  TokenIds labels;
  std::vector<std::uint8_t> masked;
};

/// BERT-style corruption. Special tokens are never masked; each other position is
/// masked with probability mask_prob, then shown as [MASK] / a random word /
/// itself in the proportions of the rule.
inline MaskedSequence apply_mlm_masking(const TokenIds& ids, std::size_t vocab_size, Rng& rng,
                                        const MaskingRule& rule = {}) {
  MaskedSequence out{ids, TokenIds(ids.size(), kIgnoreLabel), std::vector<std::uint8_t>(ids.size(), 0)};
  const bool has_words = vocab_size > Vocab::kNumSpecials;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (Vocab::is_special(ids[i])) continue;
    if (!(uniform01(rng) < rule.mask_prob)) continue;
    out.labels[i] = ids[i];
    out.masked[i] = 1;
    const double u = uniform01(rng);
    if (u < rule.replace_with_mask) {
      out.input_ids[i] = Vocab::kMask;
    } else if (u < rule.replace_with_mask + rule.replace_with_random) {
      out.input_ids[i] = has_words ? static_cast<std::int32_t>(Vocab::kNumSpecials +
                                                              uniform_index(rng, vocab_size - Vocab::kNumSpecials))
                                   : Vocab::kMask;
    }
  }
  return out;
}

/// Pads sequences to seq_len with [PAD] and an attention mask of zeros.
inline MaskedBatch pad_batch(const std::vector<MaskedSequence>& seqs, std::size_t seq_len) {
  MaskedBatch b;
  b.batch_size = seqs.size();
  b.seq_len = seq_len;
  b.input_ids.assign(b.tokens(), Vocab::kPad);
  b.attention_mask.assign(b.tokens(), 0);
  b.labels.assign(b.tokens(), kIgnoreLabel);
  b.masked_flags.assign(b.tokens(), 0);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto& q = seqs[s];
    if (q.input_ids.size() > seq_len) throw DataError("pad_batch: sequence longer than " + std::to_string(seq_len));
    for (std::size_t t = 0; t < q.input_ids.size(); ++t) {
      const std::size_t i = s * seq_len + t;
      b.input_ids[i] = q.input_ids[t];
      b.attention_mask[i] = 1;
      b.labels[i] = q.labels[t];
      b.masked_flags[i] = q.masked[t];
    }
  }
  return b;
}

/// Encoded documents split into training and held-out parts.
struct Corpus {
  std::vector<TokenIds> train;
  std::vector<TokenIds> heldout;
};

/// The last `heldout_fraction` of lines (at least one when there are two or more) are held out.
inline Corpus split_corpus(std::vector<TokenIds> docs, double heldout_fraction = 0.05) {
  if (docs.empty()) throw DataError("split_corpus: no documents");
  std::size_t held = static_cast<std::size_t>(std::floor(heldout_fraction * static_cast<double>(docs.size())));
  if (held == 0 && docs.size() >= 2 && heldout_fraction > 0.0) held = 1;
  if (held >= docs.size()) held = docs.size() - 1;
  Corpus c;
  c.heldout.assign(docs.end() - static_cast<std::ptrdiff_t>(held), docs.end());
  docs.resize(docs.size() - held);
  c.train = std::move(docs);
  return c;
}

/// The first floor(fraction * n) training documents (at least one).
inline std::vector<TokenIds> take_fraction(const std::vector<TokenIds>& docs, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("data fraction must lie in (0, 1]");
  auto n = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(docs.size()) + 1e-9));
  n = std::clamp<std::size_t>(n, 1, docs.size());
  return {docs.begin(), docs.begin() + static_cast<std::ptrdiff_t>(n)};
}

struct BatchPair {
  MaskedBatch base;
  MaskedBatch source;
  std::size_t epoch = 0;
  std::size_t index = 0;  // batch index within the epoch
};

/// Epoch-wise zip of the data in stored order (base) with a seeded shuffle of it
/// (source). The final ragged batch of each epoch is dropped. Base and source
/// sequences are masked from separate random streams, so the base batches do not
/// depend on whether sources are drawn.
class PairStream {
 public:
  PairStream(const std::vector<TokenIds>& data, std::size_t batch_size, std::size_t seq_len, std::size_t vocab_size,
             std::uint64_t seed, std::size_t epochs, MaskingRule rule = {}, bool with_source = true)
      : data_(&data),
        batch_size_(batch_size),
        seq_len_(seq_len),
        vocab_size_(vocab_size),
        seed_(seed),
        epochs_(epochs),
        rule_(rule),
        with_source_(with_source),
        base_rng_(make_rng(seed, 0xBA5E)),
        source_rng_(make_rng(seed, 0x50C)) {
    if (data.empty()) throw DataError("pair stream: empty dataset");
    if (batch_size == 0) throw ConfigError("pair stream: batch size must be positive");
    if (batch_size > data.size()) {
      throw ConfigError("pair stream: batch size " + std::to_string(batch_size) + " exceeds dataset size " +
                        std::to_string(data.size()));
    }
    start_epoch();
  }

  std::size_t batches_per_epoch() const noexcept { return data_->size() / batch_size_; }
  std::size_t epochs() const noexcept { return epochs_; }

  /// Shuffled order used for sources in the current epoch.
  const std::vector<std::size_t>& permutation() const noexcept { return perm_; }

  std::optional<BatchPair> next() {
    if (epoch_ >= epochs_) return std::nullopt;
    BatchPair p;
    p.epoch = epoch_;
    p.index = index_;
    std::vector<MaskedSequence> base, source;
    for (std::size_t k = 0; k < batch_size_; ++k) {
      const std::size_t pos = index_ * batch_size_ + k;
      base.push_back(apply_mlm_masking(fit((*data_)[pos]), vocab_size_, base_rng_, rule_));
      if (with_source_) source.push_back(apply_mlm_masking(fit((*data_)[perm_[pos]]), vocab_size_, source_rng_, rule_));
    }
    p.base = pad_batch(base, seq_len_);
    if (with_source_) p.source = pad_batch(source, seq_len_);
    if (++index_ == batches_per_epoch()) {
      ++epoch_;
      index_ = 0;
      if (epoch_ < epochs_) start_epoch();
    }
    return p;
  }

 private:
  TokenIds fit(const TokenIds& ids) const {
    if (ids.size() <= seq_len_) return ids;
    TokenIds out(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(seq_len_));
    out.back() = Vocab::kSep;
    return out;
  }

  void start_epoch() {
    perm_.resize(data_->size());
    for (std::size_t i = 0; i < perm_.size(); ++i) perm_[i] = i;
    Rng rng = make_rng(seed_, 0x5F0000 + epoch_);
    shuffle(perm_, rng);
  }

  const std::vector<TokenIds>* data_;
  std::size_t batch_size_, seq_len_, vocab_size_;
  std::uint64_t seed_;
  std::size_t epochs_;
  MaskingRule rule_;
  bool with_source_;
  Rng base_rng_, source_rng_;
  std::vector<std::size_t> perm_;
  std::size_t epoch_ = 0, index_ = 0;
};

/// Masks held-out documents with a fixed evaluation seed and packs them into batches.
inline std::vector<MaskedBatch> evaluation_batches(const std::vector<TokenIds>& docs, std::size_t seq_len,
                                                   std::size_t vocab_size, std::uint64_t eval_seed,
                                                   std::size_t batch_size = 16, MaskingRule rule = {}) {
  if (docs.empty()) throw DataError("evaluation: empty held-out set");
  Rng rng = make_rng(eval_seed, 0xE7A1);
  std::vector<MaskedBatch> out;
  std::vector<MaskedSequence> pending;
  for (const auto& d : docs) {
    TokenIds ids = d;
    if (ids.size() > seq_len) {
      ids.resize(seq_len);
      ids.back() = Vocab::kSep;
    }
    pending.push_back(apply_mlm_masking(ids, vocab_size, rng, rule));
    if (pending.size() == batch_size) {
      out.push_back(pad_batch(pending, seq_len));
      pending.clear();
    }
  }
  if (!pending.empty()) out.push_back(pad_batch(pending, seq_len));
  return out;
}

}  // namespace cdistill
