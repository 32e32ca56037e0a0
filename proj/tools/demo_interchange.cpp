// Swaps one position's hidden state from a source sentence into a base sentence,
// layer by layer, and prints what the model predicts at a masked slot of the base.
//
//   demo_interchange --checkpoint runs/teacher.ckpt --vocab runs/vocab.txt
//       --base "ixun was born in voka . ixun studied at the hospital of voka ."
//       --source "jolem was born in venlem . jolem studied at the hospital of venlem ." --swap 4 --mask 12

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <optional>

#include <CLI11.hpp>

#include "cdistill/cdistill.hpp"

using namespace cdistill;
using Real = float;

namespace {

MaskedBatch single(const TokenIds& ids, std::size_t masked_at) {
  MaskedSequence s{ids, TokenIds(ids.size(), kIgnoreLabel), std::vector<std::uint8_t>(ids.size(), 0)};
  if (masked_at < ids.size()) {
    s.labels[masked_at] = ids[masked_at];
    s.masked[masked_at] = 1;
    s.input_ids[masked_at] = Vocab::kMask;
  }
  return pad_batch({s}, ids.size());
}

std::string top_k(const ForwardResult<Real>& res, std::size_t pos, const Vocab& vocab, std::size_t k) {
  const auto& logits = res.logits->value();
  const std::size_t v = logits.shape()[1];
  std::vector<std::size_t> order(v);
  std::iota(order.begin(), order.end(), 0);
  auto score = [&](std::size_t j) { return logits[pos * v + j]; };
  k = std::min(k, v);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](auto a, auto b) { return score(a) > score(b); });
  std::string out;
  for (std::size_t i = 0; i < k; ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%s(%.3f)", i ? " " : "", vocab.token(static_cast<std::int32_t>(order[i])).c_str(),
                  static_cast<double>(score(order[i])));
    out += buf;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"interchange intervention demo"};
  std::string checkpoint, vocab_path;
  std::string base_text = "lemzan ixun was born in voka . ixun studied medicine at the hospital of voka .";
  std::string source_text = "lemlem jolem was born in venlem . jolem studied medicine at the hospital of venlem .";
  std::size_t swap_word = 5;
  std::size_t mask_word = 14;
  std::uint64_t seed = 7;
  app.add_option("--checkpoint", checkpoint, "encoder checkpoint (random model if omitted)");
  app.add_option("--vocab", vocab_path, "vocabulary matching the checkpoint");
  app.add_option("--base", base_text);
  app.add_option("--source", source_text);
  app.add_option("--swap", swap_word, "word index whose state is swapped (0-based)");
  app.add_option("--mask", mask_word, "word index masked in both sentences (0-based)");
  app.add_option("--seed", seed);
  CLI11_PARSE(app, argc, argv);

  try {
    std::optional<Vocab> vocab;
    std::optional<EncoderParams<Real>> params;
    if (!checkpoint.empty()) {
      if (vocab_path.empty()) throw ConfigError("--checkpoint needs --vocab");
      vocab = Vocab::load(vocab_path);
      params = load_checkpoint<Real>(checkpoint, vocab->size());
    } else {
      vocab = build_vocab(std::vector<std::string>{base_text, source_text});
      EncoderConfig cfg;
      cfg.num_layers = 4;
      cfg.num_heads = 2;
      cfg.hidden_dim = 16;
      cfg.ffn_dim = 32;
      cfg.vocab_size = vocab->size();
      cfg.max_seq_len = 32;
      params = init_encoder<Real>(cfg, seed);
    }
    const auto max_len = params->config.max_seq_len;
    const auto base_ids = encode(base_text, *vocab, max_len);
    const auto source_ids = encode(source_text, *vocab, max_len);
    if (base_ids.size() != source_ids.size()) {
      throw DataError("base and source must have the same number of tokens (" + std::to_string(base_ids.size()) +
                      " vs " + std::to_string(source_ids.size()) + ")");
    }
    const std::size_t col = swap_word + 1;
    const std::size_t masked = mask_word + 1;
    if (col + 1 >= base_ids.size() || masked + 1 >= base_ids.size()) throw ConfigError("word index past the end");
    if (col == masked) throw ConfigError("--swap and --mask must differ");

    const auto base = single(base_ids, masked);
    const auto source = single(source_ids, masked);
    std::cout << "base   : " << decode(base.input_ids, *vocab) << "\n"
              << "source : " << decode(source.input_ids, *vocab) << "\n"
              << "swapped column " << col << " (" << vocab->token(base_ids[col]) << " <- "
              << vocab->token(source_ids[col]) << "), reading column " << masked << "\n\n";

    Tape<Real> tape(false);
    std::cout << "plain base      " << top_k(forward(tape, *params, base), masked, *vocab, 3) << "\n";
    std::cout << "plain source    " << top_k(forward(tape, *params, source), masked, *vocab, 3) << "\n";
    for (std::size_t row = 1; row <= params->config.num_layers; ++row) {
      NeuronSelector sel{row, {col}};
      const auto res = interchange(tape, *params, sel, source, base);
      std::printf("swap at layer %zu %s\n", row, top_k(res, masked, *vocab, 3).c_str());
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
