#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sct/errors.hpp"
#include "sct/gradcheck.hpp"
#include "sct/ops.hpp"
#include "sct/vit.hpp"
#include "test_util.hpp"

namespace sct {
namespace {

using test::random_tensor;
using TD = Tensor<double>;

LinearParams<double> rand_linear(std::size_t out, std::size_t in, std::mt19937_64& gen, bool bias = true) {
  return {random_tensor({out, in}, gen, true, -1.0, 1.0), bias ? random_tensor({out}, gen, true, -1.0, 1.0) : TD()};
}

EncoderBlockParams<double> rand_block(std::size_t d, std::size_t heads, std::mt19937_64& gen) {
  EncoderBlockParams<double> p;
  p.heads = heads;
  p.norm1 = {random_tensor({d}, gen, true, 0.5, 1.5), random_tensor({d}, gen, true, -0.5, 0.5)};
  p.query = rand_linear(d, d, gen);
  p.key = rand_linear(d, d, gen, false);
  p.value = rand_linear(d, d, gen);
  p.output = rand_linear(d, d, gen);
  p.norm2 = {random_tensor({d}, gen, true, 0.5, 1.5), random_tensor({d}, gen, true, -0.5, 0.5)};
  p.mlp_in = rand_linear(4 * d, d, gen);
  p.mlp_out = rand_linear(d, 4 * d, gen);
  return p;
}

std::vector<NamedParameter<double>> block_parameters(const EncoderBlockParams<double>& p) {
  std::vector<NamedParameter<double>> out;
  auto lin = [&](const std::string& n, const LinearParams<double>& l) {
    out.push_back({n + ".weight", l.weight});
    if (l.bias.defined()) out.push_back({n + ".bias", l.bias});
  };
  out.push_back({"norm1.gamma", p.norm1.gamma});
  out.push_back({"norm1.beta", p.norm1.beta});
  lin("query", p.query);
  lin("key", p.key);
  lin("value", p.value);
  lin("output", p.output);
  out.push_back({"norm2.gamma", p.norm2.gamma});
  out.push_back({"norm2.beta", p.norm2.beta});
  lin("mlp_in", p.mlp_in);
  lin("mlp_out", p.mlp_out);
  return out;
}

// y = W x + b on one token, written out by hand.
std::vector<double> affine(const LinearParams<double>& l, const std::vector<double>& x) {
  const std::size_t out = l.weight.dim(0), in = l.weight.dim(1);
  std::vector<double> y(out, 0.0);
  for (std::size_t i = 0; i < out; ++i) {
    for (std::size_t j = 0; j < in; ++j) y[i] += l.weight.at(i * in + j) * x[j];
    if (l.bias.defined()) y[i] += l.bias.at(i);
  }
  return y;
}

TEST(PatchEmbed, TokenCounts) {
  std::mt19937_64 gen(1);
  ModalitySpec big{"a", 120, 120, 1, 15}, small{"b", 30, 30, 2, 15};
  EXPECT_EQ(big.num_patches(), 64u);
  auto emb = rand_linear(4, small.patch_dim(), gen);
  TD tokens = patch_embed(random_tensor({2, 30, 30, 2}, gen), small, emb);
  EXPECT_EQ(tokens.shape(), (Shape{2, 4, 4}));
}

TEST(PatchEmbed, ZeroImageAndBiasGiveZeroTokens) {
  std::mt19937_64 gen(2);
  ModalitySpec spec{"a", 6, 6, 2, 3};
  LinearParams<double> emb{random_tensor({5, spec.patch_dim()}, gen), TD({5})};
  TD tokens = patch_embed(TD({1, 6, 6, 2}), spec, emb);
  for (double v : tokens.data()) EXPECT_EQ(v, 0.0);
}

TEST(PatchEmbed, PatchLayoutIsRowsColumnsChannels) {
  std::mt19937_64 gen(3);
  const std::size_t h = 4, w = 6, c = 2, p = 2;
  TD img = random_tensor({1, h, w, c}, gen);
  TD patches = extract_patches(img, p);
  ASSERT_EQ(patches.shape(), (Shape{1, 6, 8}));
  for (std::size_t gr = 0; gr < h / p; ++gr)
    for (std::size_t gc = 0; gc < w / p; ++gc) {
      std::size_t k = 0;
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t col = 0; col < p; ++col)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t src = ((gr * p + r) * w + (gc * p + col)) * c + ch;
            EXPECT_EQ(patches.at((gr * (w / p) + gc) * 8 + k++), img.at(src));
          }
    }
}

TEST(PatchEmbed, RejectsIndivisibleSpec) {
  EXPECT_THROW((ModalitySpec{"a", 30, 30, 2, 7}.validate()), ConfigError);
  std::mt19937_64 gen(4);
  ModalitySpec spec{"a", 6, 6, 2, 3};
  EXPECT_THROW(patch_embed(TD({1, 6, 6, 3}), spec, rand_linear(4, spec.patch_dim(), gen)), ShapeError);
}

TEST(ClassToken, AppendedLastVerbatim) {
  std::mt19937_64 gen(5);
  for (std::size_t k : {4u, 64u}) {
    TD tokens = random_tensor({2, k, 3}, gen), cls = random_tensor({3}, gen);
    auto seq = append_class_token(tokens, cls);
    EXPECT_EQ(seq.length(), k + 1);
    EXPECT_EQ(seq.class_index(), k);
    TD got = select_token(seq.tokens, k);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(got.at(b * 3 + j), cls.at(j));
  }
  EXPECT_THROW(append_class_token(TD({1, 4, 3}), TD({2})), ShapeError);
}

TEST(PositionalEmbedding, EnabledDisabledAndAddition) {
  std::mt19937_64 gen(6);
  TokenSequence<double> seq{random_tensor({2, 5, 3}, gen)};
  auto same = [&](const TokenSequence<double>& s) {
    for (std::size_t i = 0; i < seq.tokens.numel(); ++i) EXPECT_EQ(s.tokens.at(i), seq.tokens.at(i));
  };
  same(add_positional_embedding(seq, TD({5, 3}), true));
  same(add_positional_embedding(seq, random_tensor({5, 3}, gen), false));
  TD pos = random_tensor({5, 3}, gen);
  auto out = add_positional_embedding(seq, pos, true);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(out.tokens.at(b * 15 + i), seq.tokens.at(b * 15 + i) + pos.at(i));
  EXPECT_THROW(add_positional_embedding(seq, TD({4, 3}), true), ShapeError);
}

TEST(Attention, SingletonSequenceIsProjectedValue) {
  std::mt19937_64 gen(7);
  auto p = rand_block(4, 2, gen);
  TD x = random_tensor({1, 1, 4}, gen);
  auto out = multi_head_self_attention(TokenSequence<double>{x}, p);
  const auto ref = affine(p.output, affine(p.value, {x.data().begin(), x.data().end()}));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.tokens.at(j), ref[j], 1e-12);
}

TEST(Attention, IdenticalTokensGiveIdenticalRows) {
  std::mt19937_64 gen(8);
  auto p = rand_block(4, 2, gen);
  TD tok = random_tensor({4}, gen);
  std::vector<double> v;
  for (int r = 0; r < 2; ++r) v.insert(v.end(), tok.data().begin(), tok.data().end());
  auto out = multi_head_self_attention(TokenSequence<double>{TD({1, 2, 4}, v)}, p);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out.tokens.at(j), out.tokens.at(4 + j));
}

TEST(Attention, MatchesDenseFormulaOracle) {
  std::mt19937_64 gen(9);
  const std::size_t len = 3, d = 4;
  auto p = rand_block(d, 1, gen);
  TD x = random_tensor({1, len, d}, gen);
  auto out = multi_head_self_attention(TokenSequence<double>{x}, p);
  std::vector<std::vector<double>> q(len), k(len), v(len);
  for (std::size_t t = 0; t < len; ++t) {
    std::vector<double> xt(x.data().begin() + t * d, x.data().begin() + (t + 1) * d);
    q[t] = affine(p.query, xt);
    k[t] = affine(p.key, xt);
    v[t] = affine(p.value, xt);
  }
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<double> s(len);
    for (std::size_t j = 0; j < len; ++j) {
      s[j] = 0.0;
      for (std::size_t c = 0; c < d; ++c) s[j] += q[i][c] * k[j][c];
      s[j] /= std::sqrt(static_cast<double>(d));
    }
    double z = 0.0;
    for (double& e : s) z += (e = std::exp(e));
    std::vector<double> mixed(d, 0.0);
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t c = 0; c < d; ++c) mixed[c] += s[j] / z * v[j][c];
    const auto ref = affine(p.output, mixed);
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.tokens.at(i * d + c), ref[c], 1e-10);
  }
}

TEST(Attention, MultiHeadMatchesPerHeadSlices) {
  // Heads see disjoint column slices of q/k/v.
  std::mt19937_64 gen(10);
  const std::size_t len = 5, d = 6, heads = 3, dh = 2;
  TD q = random_tensor({2, len, d}, gen), k = random_tensor({2, len, d}, gen), v = random_tensor({2, len, d}, gen);
  TD out = attention_heads(q, k, v, heads);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> s(len);
        double mx = -1e300, z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          s[j] = 0.0;
          for (std::size_t c = 0; c < dh; ++c)
            s[j] += q.at((b * len + i) * d + h * dh + c) * k.at((b * len + j) * d + h * dh + c);
          s[j] /= std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t c = 0; c < dh; ++c) {
          double ref = 0.0;
          for (std::size_t j = 0; j < len; ++j) ref += s[j] / z * v.at((b * len + j) * d + h * dh + c);
          EXPECT_NEAR(out.at((b * len + i) * d + h * dh + c), ref, 1e-12);
        }
      }
}

TEST(Attention, WeightsAreRowStochastic) {
  std::mt19937_64 gen(11);
  auto p = rand_block(8, 4, gen);
  AttentionProbe<double> probe;
  multi_head_self_attention(TokenSequence<double>{random_tensor({3, 7, 8}, gen)}, p, &probe);
  ASSERT_EQ(probe.weights.size(), 3u * 4u * 7u * 7u);
  for (std::size_t r = 0; r < 3 * 4 * 7; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < 7; ++j) total += probe.weights[r * 7 + j];
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Attention, RejectsIndivisibleHeads) {
  std::mt19937_64 gen(12);
  TD q = random_tensor({1, 3, 6}, gen);
  EXPECT_THROW(attention_heads(q, q, q, 4), ShapeError);
}

TEST(StochasticDepth, InactiveCasesAreIdentity) {
  std::mt19937_64 gen(13);
  TD x = random_tensor({10, 3}, gen);
  Rng rng(1);
  for (bool train : {false, true}) {
    TD y = stochastic_depth(x, 0.0, train, rng);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.at(i), x.at(i));
  }
  TD y = stochastic_depth(x, 0.25, false, rng);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.at(i), x.at(i));
  EXPECT_THROW(stochastic_depth(x, 1.0, true, rng), ConfigError);
  EXPECT_THROW(stochastic_depth(x, -0.1, true, rng), ConfigError);
}

TEST(StochasticDepth, MonteCarloDropRateAndCompensation) {
  const std::size_t n = 100000;
  TD ones = TD::full({n, 2}, 1.0);
  Rng rng(2);
  TD y = stochastic_depth(ones, 0.25, true, rng);
  std::size_t dropped = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_EQ(y.at(2 * i), y.at(2 * i + 1));  // one draw per sample
    if (y.at(2 * i) == 0.0) ++dropped;
    else EXPECT_DOUBLE_EQ(y.at(2 * i), 1.0 / 0.75);
    total += y.at(2 * i);
  }
  EXPECT_NEAR(static_cast<double>(dropped) / n, 0.25, 0.01);
  EXPECT_NEAR(total / n, 1.0, 0.01);
}

TEST(EncoderBlock, NoDropTrainingEqualsEval) {
  std::mt19937_64 gen(14);
  auto p = rand_block(8, 2, gen);
  TokenSequence<double> seq{random_tensor({2, 5, 8}, gen)};
  Rng a(1), b(1);
  auto t = encoder_block(seq, p, 0.0, true, a);
  auto e = encoder_block(seq, p, 0.0, false, b);
  for (std::size_t i = 0; i < seq.tokens.numel(); ++i) EXPECT_EQ(t.tokens.at(i), e.tokens.at(i));
}

TEST(EncoderBlock, EvalIsPureAndSeededTrainingReproduces) {
  std::mt19937_64 gen(15);
  auto p = rand_block(8, 2, gen);
  TokenSequence<double> seq{random_tensor({6, 5, 8}, gen)};
  Rng r1(9), r2(123);
  auto e1 = encoder_block(seq, p, 0.25, false, r1);
  auto e2 = encoder_block(seq, p, 0.25, false, r2);
  Rng s1(77), s2(77), s3(78);
  auto t1 = encoder_block(seq, p, 0.25, true, s1);
  auto t2 = encoder_block(seq, p, 0.25, true, s2);
  auto t3 = encoder_block(seq, p, 0.25, true, s3);
  bool differs = false;
  for (std::size_t i = 0; i < seq.tokens.numel(); ++i) {
    EXPECT_EQ(e1.tokens.at(i), e2.tokens.at(i));
    EXPECT_EQ(t1.tokens.at(i), t2.tokens.at(i));
    differs |= t1.tokens.at(i) != t3.tokens.at(i);
  }
  EXPECT_TRUE(differs);
}

TEST(EncoderBlock, PreservesShape) {
  std::mt19937_64 gen(16);
  for (std::size_t len : {1u, 2u, 9u}) {
    auto p = rand_block(6, 3, gen);
    Rng rng(1);
    auto out = encoder_block(TokenSequence<double>{random_tensor({2, len, 6}, gen)}, p, 0.25, true, rng);
    EXPECT_EQ(out.tokens.shape(), (Shape{2, len, 6}));
  }
}

TEST(EncoderBlock, PreNormResidualStructure) {
  // Zeroed output projections turn both branches off.
  std::mt19937_64 gen(17);
  auto p = rand_block(4, 2, gen);
  for (auto* l : {&p.output, &p.mlp_out}) {
    for (double& w : l->weight.mutable_data()) w = 0.0;
    for (double& b : l->bias.mutable_data()) b = 0.0;
  }
  TokenSequence<double> seq{random_tensor({1, 3, 4}, gen)};
  Rng rng(1);
  auto out = encoder_block(seq, p, 0.0, false, rng);
  for (std::size_t i = 0; i < seq.tokens.numel(); ++i) EXPECT_EQ(out.tokens.at(i), seq.tokens.at(i));
}

TEST(EncoderBlock, PatchPermutationLeavesClassTokenUnchanged) {
  std::mt19937_64 gen(18);
  const std::size_t k = 6, d = 8;
  std::vector<EncoderBlockParams<double>> blocks{rand_block(d, 2, gen), rand_block(d, 2, gen), rand_block(d, 2, gen)};
  TD patches = random_tensor({2, k, d}, gen), cls = random_tensor({d}, gen);
  std::vector<std::size_t> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  std::vector<double> shuffled(patches.numel());
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < k; ++t)
      for (std::size_t c = 0; c < d; ++c) shuffled[(b * k + t) * d + c] = patches.at((b * k + perm[t]) * d + c);
  auto run = [&](const TD& toks) {
    auto seq = add_positional_embedding(append_class_token(toks, cls), TD({k + 1, d}), false);
    Rng rng(1);
    for (const auto& bp : blocks) seq = encoder_block(seq, bp, 0.0, false, rng);
    return select_token(seq.tokens, k);
  };
  TD a = run(patches), b = run(TD({2, k, d}, shuffled));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-5);
}

TEST(EncoderBlock, GradientCheckAtEmbeddingEight) {
  std::mt19937_64 gen(19);
  auto p = rand_block(8, 2, gen);
  TD x = random_tensor({2, 4, 8}, gen, true);
  auto params = block_parameters(p);
  params.push_back({"input", x});
  auto forward = [&] {
    Rng rng(1);
    return test::weighted_sum(encoder_block(TokenSequence<double>{x}, p, 0.0, false, rng).tokens);
  };
  const auto report = finite_difference_check(forward, params);
  EXPECT_TRUE(report.pass) << report.worst_parameter << " " << report.max_relative_error;
}

TEST(EncoderBlock, GradientCheckWithPinnedStochasticDepth) {
  std::mt19937_64 gen(20);
  auto p = rand_block(4, 2, gen);
  TD x = random_tensor({6, 3, 4}, gen, true);
  auto params = block_parameters(p);
  params.push_back({"input", x});
  auto forward = [&] {
    Rng rng(5);
    return test::weighted_sum(encoder_block(TokenSequence<double>{x}, p, 0.25, true, rng).tokens);
  };
  const auto report = finite_difference_check(forward, params);
  EXPECT_TRUE(report.pass) << report.worst_parameter << " " << report.max_relative_error;
}

TEST(EncoderBlock, UnpinnedStochasticDepthIsRejectedByGradCheck) {
  std::mt19937_64 gen(21);
  auto p = rand_block(4, 2, gen);
  TD x = random_tensor({16, 3, 4}, gen, true);
  auto params = block_parameters(p);
  Rng shared(5);
  auto forward = [&] { return test::weighted_sum(encoder_block(TokenSequence<double>{x}, p, 0.5, true, shared).tokens); };
  EXPECT_THROW(finite_difference_check(forward, params), NonDeterminismError);
}

}  // namespace
}  // namespace sct
