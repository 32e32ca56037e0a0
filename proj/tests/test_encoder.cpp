#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"

using namespace cdistill;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "cdistill_test_encoder";
  fs::create_directories(dir);
  return dir / name;
}

MaskedBatch fixed_batch(std::size_t seq, std::vector<std::vector<std::int32_t>> seqs) {
  std::vector<MaskedSequence> ms;
  for (auto& s : seqs) {
    MaskedSequence m{s, TokenIds(s.size(), kIgnoreLabel), std::vector<std::uint8_t>(s.size(), 0)};
    ms.push_back(std::move(m));
  }
  return pad_batch(ms, seq);
}

}  // namespace

TEST(EncoderConfig, HiddenMustDivideByHeads) {
  auto c = oracle::tiny_config(2, 6, 4, 10, 8);
  EXPECT_THROW(c.validate(), ConfigError);
  c.num_heads = 3;
  EXPECT_NO_THROW(c.validate());
  c.vocab_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(EncoderParams, InitMatchesConfigAndAuditCatchesDrift) {
  const auto c = oracle::tiny_config(3, 8, 2, 20, 6);
  auto p = init_encoder<float>(c, 1);
  EXPECT_NO_THROW(audit_shapes(p));
  EXPECT_EQ(p.blocks[1].w1.name, "layers.2.ffn.w1");
  EXPECT_EQ(p.head_weight.value.shape(), (Shape{8, 20}));
  for (float g : p.blocks[0].ln1_gamma.value.values()) EXPECT_EQ(g, 1.0f);
  for (float b : p.head_bias.value.values()) EXPECT_EQ(b, 0.0f);
  double ss = 0;
  for (float w : p.token_embedding.value.values()) ss += double(w) * w;
  EXPECT_NEAR(std::sqrt(ss / p.token_embedding.value.size()), 0.02, 0.004);
  p.blocks[2].wq.value = Tensor<float>({8, 7});
  EXPECT_THROW(audit_shapes(p), ShapeError);
}

TEST(Forward, PlainForwardPopulatesEveryGridRow) {
  const auto c = oracle::tiny_config(3, 8, 2, 20, 6);
  const auto p = init_encoder<double>(c, 2);
  Rng rng = make_rng(3);
  const auto batch = oracle::random_batch(rng, 2, 6, 20);
  Tape<double> tape(false);
  const auto res = forward(tape, p, batch);
  ASSERT_EQ(res.rows.size(), 4u);
  for (const auto& r : res.rows) EXPECT_EQ(r.shape(), (Shape{12, 8}));
  EXPECT_EQ(res.logits_value().shape(), (Shape{12, 20}));
  EXPECT_EQ(res.final_states().id, res.rows.back().id);
  Tape<double> t2(false);
  auto probs = softmax(t2.constant(res.logits_value()));
  for (std::size_t r = 0; r < probs.value().rows(); ++r) {
    double s = 0;
    for (double v : probs.value().row(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(Forward, MatchesLoopReference) {
  const auto c = oracle::tiny_config(2, 8, 2, 15, 7);
  const auto p = oracle::random_params<double>(c, 4);
  Rng rng = make_rng(4);
  const auto batch = oracle::random_batch(rng, 3, 7, 15);
  Tape<double> tape(false);
  const auto res = forward(tape, p, batch);
  oracle::Grid ref;
  oracle::Reference<double> r{p};
  for (std::size_t b = 0; b < 3; ++b)
    for (const auto& row : r.head(r.rows(batch, b).back())) ref.push_back(row);
  EXPECT_LT(oracle::max_abs_diff(ref, res.logits_value()), 1e-9);
}

TEST(Forward, IdentityOverrideIsBitIdentical) {
  const auto c = oracle::tiny_config(3, 8, 2, 20, 6);
  const auto p = oracle::random_params<double>(c, 5);
  Rng rng = make_rng(5);
  const auto batch = oracle::random_batch(rng, 2, 6, 20);
  Tape<double> tape(false);
  const auto plain = forward(tape, p, batch);
  for (std::size_t row = 1; row <= 3; ++row) {
    NeuronSelector sel{row, {1, 3, 4}};
    const auto idx = sel.flat_rows(2, 6);
    auto vals = gather_rows(plain.rows[row], std::span<const std::size_t>(idx));
    std::vector<RowOverride<double>> ov{{sel, vals}};
    const auto res = forward(tape, p, batch, std::span<const RowOverride<double>>(ov));
    EXPECT_EQ(res.logits_value(), plain.logits_value()) << "row " << row;
  }
}

TEST(Forward, OverrideMatchesManualRecomposition) {
  // 2 layers, hidden 4, seq 3: replace the column-2 vector after block 1.
  const auto c = oracle::tiny_config(2, 4, 2, 9, 3);
  const auto p = oracle::random_params<double>(c, 6);
  const auto batch = fixed_batch(3, {{2, 7, 3}});
  Tensor<double> injected({1, 4}, {0.3, -1.1, 0.8, 0.05});
  Tape<double> tape(false);
  std::vector<RowOverride<double>> ov{{NeuronSelector{1, {2}}, tape.constant(injected)}};
  const auto res = forward(tape, p, batch, std::span<const RowOverride<double>>(ov));

  oracle::Reference<double> ref{p};
  auto h1 = ref.block(1, ref.embed(batch, 0), batch, 0);
  h1[1] = oracle::col(injected);
  const auto logits = ref.head(ref.block(2, h1, batch, 0));
  EXPECT_LT(oracle::max_abs_diff(logits, res.logits_value()), 1e-12);
}

TEST(Forward, RejectsBadSelectors) {
  const auto c = oracle::tiny_config(2, 4, 2, 9, 4);
  const auto p = init_encoder<double>(c, 1);
  const auto batch = fixed_batch(4, {{2, 7, 3}});
  Tape<double> tape(false);
  auto v = tape.constant(Tensor<double>({1, 4}));
  for (const NeuronSelector& s : {NeuronSelector{0, {1}}, NeuronSelector{3, {1}}, NeuronSelector{1, {5}},
                                  NeuronSelector{1, {}}, NeuronSelector{1, {2, 2}}}) {
    std::vector<RowOverride<double>> ov{{s, v}};
    EXPECT_THROW(forward(tape, p, batch, std::span<const RowOverride<double>>(ov)), InterventionError);
  }
  std::vector<RowOverride<double>> wrong{{NeuronSelector{1, {1, 2}}, v}};
  EXPECT_THROW(forward(tape, p, batch, std::span<const RowOverride<double>>(wrong)), ShapeError);
}

TEST(Forward, AttentionRowsAreDistributions) {
  const auto c = oracle::tiny_config(2, 8, 2, 20, 6);
  const auto p = oracle::random_params<double>(c, 7);
  const auto batch = fixed_batch(6, {{2, 8, 9, 3}, {2, 10, 11, 12, 13, 3}});
  Tape<double> tape(false);
  ForwardOptions opts;
  opts.keep_attention = true;
  const auto res = forward(tape, p, batch, {}, opts);
  ASSERT_EQ(res.attention.size(), 2u);
  for (const auto& a : res.attention) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
      const std::size_t b = r / (2 * 6);
      double s = 0;
      for (std::size_t j = 0; j < 6; ++j) {
        s += a.at(r, j);
        if (!batch.attention_mask[b * 6 + j]) {
          EXPECT_EQ(a.at(r, j), 0.0);
        }
      }
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Forward, BatchPermutationPermutesOutputs) {
  const auto c = oracle::tiny_config(2, 8, 2, 20, 6);
  const auto p = oracle::random_params<double>(c, 8);
  const auto ab = fixed_batch(6, {{2, 8, 9, 3}, {2, 10, 11, 12, 13, 3}});
  const auto ba = fixed_batch(6, {{2, 10, 11, 12, 13, 3}, {2, 8, 9, 3}});
  Tape<double> tape(false);
  const auto& x = forward(tape, p, ab).logits_value();
  const auto& y = forward(tape, p, ba).logits_value();
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t v = 0; v < 20; ++v) {
      EXPECT_EQ(x.at(t, v), y.at(6 + t, v));
      EXPECT_EQ(x.at(6 + t, v), y.at(t, v));
    }
}

TEST(Forward, PaddingLeavesRealPositionsUnchanged) {
  const auto c = oracle::tiny_config(2, 8, 2, 20, 12);
  const auto p = oracle::random_params<float>(c, 9);
  const auto short_b = fixed_batch(5, {{2, 8, 9, 14, 3}});
  const auto long_b = fixed_batch(12, {{2, 8, 9, 14, 3}});
  Tape<float> tape(false);
  const auto& x = forward(tape, p, short_b).logits_value();
  const auto& y = forward(tape, p, long_b).logits_value();
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t v = 0; v < 20; ++v) EXPECT_NEAR(x.at(t, v), y.at(t, v), 1e-5);
}

TEST(Forward, SequenceLongerThanMaxIsRejected) {
  const auto c = oracle::tiny_config(1, 4, 1, 9, 3);
  const auto p = init_encoder<double>(c, 1);
  Tape<double> tape(false);
  EXPECT_THROW(forward(tape, p, fixed_batch(4, {{2, 5, 3}})), ShapeError);
}

TEST(StudentInit, TakesLastLayerOfEachGroup) {
  const auto t = oracle::random_params<double>(oracle::tiny_config(12, 4, 2, 9, 4), 10);
  const auto s = init_student_from_teacher(t, 3);
  ASSERT_EQ(s.config.num_layers, 3u);
  EXPECT_NO_THROW(audit_shapes(s));
  const std::size_t from[] = {4, 8, 12};
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(s.blocks[i].wq.value, t.blocks[from[i] - 1].wq.value);
    EXPECT_EQ(s.blocks[i].ln2_beta.value, t.blocks[from[i] - 1].ln2_beta.value);
    EXPECT_EQ(s.blocks[i].w2.name, "layers." + std::to_string(i + 1) + ".ffn.w2");
  }
  EXPECT_EQ(s.token_embedding.value, t.token_embedding.value);
  EXPECT_EQ(s.position_embedding.value, t.position_embedding.value);
  EXPECT_EQ(s.head_weight.value, t.head_weight.value);
  EXPECT_EQ(s.head_bias.value, t.head_bias.value);
}

TEST(StudentInit, SixToThreeUsesTwoFourSix) {
  const auto t = oracle::random_params<double>(oracle::tiny_config(6, 4, 2, 9, 4), 11);
  const auto s = init_student_from_teacher(t, 3);
  for (std::size_t i = 1; i <= 3; ++i) EXPECT_EQ(s.blocks[i - 1].w1.value, t.blocks[2 * i - 1].w1.value);
}

TEST(StudentInit, EqualDepthIsExactCopy) {
  const auto t = oracle::random_params<double>(oracle::tiny_config(6, 4, 2, 9, 4), 12);
  const auto s = init_student_from_teacher(t, 6);
  std::vector<std::pair<std::string, Tensor<double>>> a, b;
  t.for_each([&](const auto& p) { a.emplace_back(p.name, p.value); });
  s.for_each([&](const auto& p) { b.emplace_back(p.name, p.value); });
  EXPECT_EQ(a, b);
  EXPECT_EQ(s.config, t.config);
}

TEST(StudentInit, NonDivisibleNamesBothCounts) {
  const auto t = init_encoder<double>(oracle::tiny_config(6, 4, 2, 9, 4), 1);
  try {
    init_student_from_teacher(t, 4);
    FAIL();
  } catch (const AlignmentError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find('6'), std::string::npos);
    EXPECT_NE(m.find('4'), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto c = oracle::tiny_config(2, 8, 2, 20, 6);
  const auto p = oracle::random_params<float>(c, 13);
  const auto path = temp_file("rt.ckpt");
  save_checkpoint(p, path);
  const auto q = load_checkpoint<float>(path, std::size_t{20});
  EXPECT_EQ(q.config, c);
  std::vector<Tensor<float>> a, b;
  p.for_each([&](const auto& x) { a.push_back(x.value); });
  q.for_each([&](const auto& x) { b.push_back(x.value); });
  EXPECT_EQ(a, b);
}

TEST(Checkpoint, ReloadReproducesLogits) {
  const auto c = oracle::tiny_config(2, 16, 4, 30, 10);
  const auto p = oracle::random_params<float>(c, 14, 0.1);
  const auto path = temp_file("desk2.ckpt");
  save_checkpoint(p, path);
  const auto q = load_checkpoint<float>(path);
  Rng rng = make_rng(14);
  const auto batch = oracle::random_batch(rng, 4, 10, 30);
  Tape<float> tape(false);
  EXPECT_EQ(forward(tape, p, batch).logits_value(), forward(tape, q, batch).logits_value());
}

TEST(Checkpoint, DistinctDiagnostics) {
  const auto c = oracle::tiny_config(1, 4, 1, 9, 3);
  const auto p = init_encoder<float>(c, 1);
  const auto good = temp_file("good.ckpt");
  save_checkpoint(p, good);
  std::ifstream is(good, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  auto write = [](const fs::path& path, const std::string& data) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(data.data(), static_cast<std::streamsize>(data.size()));
  };
  auto kind_of = [](const fs::path& path, std::optional<std::size_t> vocab = {}) {
    try {
      load_checkpoint<float>(path, vocab);
    } catch (const CheckpointError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no error for " << path;
    return CheckpointError::Kind::kIo;
  };
  using K = CheckpointError::Kind;

  EXPECT_EQ(kind_of(good, std::size_t{10}), K::kVocabMismatch);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  write(temp_file("magic.ckpt"), bad_magic);
  EXPECT_EQ(kind_of(temp_file("magic.ckpt")), K::kCorruptHeader);

  write(temp_file("trunc.ckpt"), bytes.substr(0, bytes.size() - 7));
  EXPECT_EQ(kind_of(temp_file("trunc.ckpt")), K::kTruncatedPayload);

  std::string renamed = bytes;
  const auto at = renamed.find("layers.1.attn.wq");
  ASSERT_NE(at, std::string::npos);
  renamed[at + 14] = 'x';
  write(temp_file("manifest.ckpt"), renamed);
  EXPECT_EQ(kind_of(temp_file("manifest.ckpt")), K::kManifestMismatch);

  std::string garbled = bytes;
  garbled[17] = '#';
  write(temp_file("json.ckpt"), garbled);
  EXPECT_EQ(kind_of(temp_file("json.ckpt")), K::kCorruptHeader);

  EXPECT_EQ(kind_of(temp_file("missing.ckpt")), K::kIo);
}

TEST(Checkpoint, DoubleStoredLoadsAsFloat) {
  const auto c = oracle::tiny_config(1, 4, 1, 9, 3);
  const auto p = oracle::random_params<double>(c, 15);
  const auto path = temp_file("f64.ckpt");
  save_checkpoint(p, path);
  const auto q = load_checkpoint<float>(path);
  EXPECT_EQ(q.blocks[0].wq.value[3], static_cast<float>(p.blocks[0].wq.value[3]));
}
