#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sct/app.hpp"
#include "sct/errors.hpp"
#include "sct/training.hpp"
#include "test_util.hpp"

namespace sct {
namespace {

using TD = Tensor<double>;

double naive_bce(std::span<const double> s, std::span<const std::uint8_t> y) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-s[i]));
    total += -(y[i] * std::log(p) + (1 - y[i]) * std::log(1.0 - p));
  }
  return total / static_cast<double>(s.size());
}

TEST(Bce, LogTwoAtZero) {
  const std::uint8_t y[] = {1};
  EXPECT_NEAR(bce_with_logits(TD({1}, std::vector<double>{0.0}), y).item(), std::log(2.0), 1e-15);
}

TEST(Bce, StableAtLargeLogits) {
  const std::uint8_t one[] = {1}, zero[] = {0};
  const double tail = std::log1p(std::exp(-20.0));
  EXPECT_NEAR(bce_with_logits(TD({1}, std::vector<double>{20.0}), one).item(), tail, 1e-20);
  EXPECT_NEAR(bce_with_logits(TD({1}, std::vector<double>{-20.0}), zero).item(), tail, 1e-20);
  EXPECT_NEAR(tail, 2.06e-9, 1e-11);
  EXPECT_NEAR(bce_with_logits(TD({1}, std::vector<double>{-20.0}), one).item(), 20.0 + tail, 1e-12);
  const float big = bce_with_logits(Tensor<float>({1}, std::vector<float>{-500.0f}), one).item();
  EXPECT_TRUE(std::isfinite(big));
  EXPECT_NEAR(big, 500.0f, 1e-3f);
}

TEST(Bce, MatchesNaiveFormula) {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = test::uniform_values(19, gen, -6.0, 6.0);
    std::vector<std::uint8_t> y(19);
    for (auto& v : y) v = gen() & 1u;
    EXPECT_NEAR(bce_with_logits(TD({19}, s), y).item(), naive_bce(s, y), 1e-9);
  }
}

TEST(Bce, GradientIsSigmoidMinusTargetOverCount) {
  std::mt19937_64 gen(6);
  const auto s = test::uniform_values(12, gen, -4.0, 4.0);
  std::vector<std::uint8_t> y(12);
  for (auto& v : y) v = gen() & 1u;
  TD logits({3, 4}, s, true);
  bce_with_logits(logits, y).backward();
  for (std::size_t i = 0; i < 12; ++i)
    EXPECT_NEAR(logits.grad()[i], (1.0 / (1.0 + std::exp(-s[i])) - y[i]) / 12.0, 1e-15);
}

TEST(Bce, Errors) {
  const std::uint8_t bad[] = {0, 2};
  EXPECT_THROW(bce_with_logits(TD({2}, std::vector<double>{0.0, 1.0}), bad), ConfigError);
  const std::uint8_t short_y[] = {1};
  EXPECT_THROW(bce_with_logits(TD({2}, std::vector<double>{0.0, 1.0}), short_y), ShapeError);
}

std::vector<NamedParameter<double>> make_params(std::mt19937_64& gen) {
  return {{"a", test::random_tensor({3, 4}, gen, true)}, {"b", test::random_tensor({5}, gen, true)}};
}

void set_grads(std::vector<NamedParameter<double>>& params, std::mt19937_64& gen) {
  for (auto& p : params) {
    auto g = p.tensor.mutable_grad();
    const auto v = test::uniform_values(g.size(), gen, -1.0, 1.0);
    std::copy(v.begin(), v.end(), g.begin());
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::mt19937_64 gen(1);
  auto params = make_params(gen);
  const auto before = params[0].tensor.data();
  std::vector<double> copy(before.begin(), before.end());
  for (auto& p : params) std::fill(p.tensor.mutable_grad().begin(), p.tensor.mutable_grad().end(), 0.0);
  auto state = AdamState<double>::zeros_like(params);
  AdamConfig c;
  c.lr = 0.1;
  adam_step<double>(params, state, c);
  EXPECT_TRUE(std::equal(copy.begin(), copy.end(), params[0].tensor.data().begin()));
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<NamedParameter<double>> params{{"w", TD({1}, std::vector<double>{0.0}, true)}};
  params[0].tensor.mutable_grad()[0] = 1.0;
  auto state = AdamState<double>::zeros_like(params);
  AdamConfig c;
  c.lr = 0.1;
  adam_step<double>(params, state, c);
  EXPECT_NEAR(params[0].tensor.data()[0], -0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, MatchesIndependentLoop) {
  std::mt19937_64 gen(2);
  auto params = make_params(gen);
  AdamConfig c;
  c.lr = 0.01;
  c.beta1 = 0.8;
  c.beta2 = 0.95;
  auto state = AdamState<double>::zeros_like(params);
  std::vector<std::vector<double>> theta, m, v;
  for (const auto& p : params) {
    theta.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    m.emplace_back(p.tensor.numel(), 0.0);
    v.emplace_back(p.tensor.numel(), 0.0);
  }
  for (int t = 1; t <= 6; ++t) {
    set_grads(params, gen);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto g = params[k].tensor.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[k][i] = c.beta1 * m[k][i] + (1 - c.beta1) * g[i];
        v[k][i] = c.beta2 * v[k][i] + (1 - c.beta2) * g[i] * g[i];
        const double mh = m[k][i] / (1 - std::pow(c.beta1, t)), vh = v[k][i] / (1 - std::pow(c.beta2, t));
        theta[k][i] -= c.lr * mh / (std::sqrt(vh) + c.eps);
      }
    }
    adam_step<double>(params, state, c);
    EXPECT_EQ(state.step, static_cast<std::uint64_t>(t));
  }
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < theta[k].size(); ++i) EXPECT_NEAR(params[k].tensor.data()[i], theta[k][i], 1e-12);
}

TEST(Adam, NonzeroGradientChangesParameters) {
  std::mt19937_64 gen(3);
  auto params = make_params(gen);
  set_grads(params, gen);
  const std::vector<double> before(params[1].tensor.data().begin(), params[1].tensor.data().end());
  auto state = AdamState<double>::zeros_like(params);
  adam_step<double>(params, state, AdamConfig{});
  EXPECT_FALSE(std::equal(before.begin(), before.end(), params[1].tensor.data().begin()));
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  std::mt19937_64 gen(4);
  auto params = make_params(gen);
  set_grads(params, gen);
  params[1].tensor.mutable_grad()[2] = std::nan("");
  const std::vector<double> before(params[0].tensor.data().begin(), params[0].tensor.data().end());
  auto state = AdamState<double>::zeros_like(params);
  try {
    adam_step<double>(params, state, AdamConfig{});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos) << e.what();
  }
  EXPECT_EQ(state.step, 0u);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), params[0].tensor.data().begin()));
}

TEST(Adam, InvalidConfig) {
  AdamConfig c;
  c.lr = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = AdamConfig{};
  c.beta1 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = AdamConfig{};
  c.eps = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ClipGradNorm, RescalesToBound) {
  std::mt19937_64 gen(7);
  auto params = make_params(gen);
  set_grads(params, gen);
  auto norm = [&] {
    double s = 0.0;
    for (const auto& p : params)
      for (double g : p.tensor.grad()) s += g * g;
    return std::sqrt(s);
  };
  const double before = norm();
  EXPECT_NEAR(clip_grad_norm<double>(params, before / 2), before, 1e-12);
  EXPECT_NEAR(norm(), before / 2, 1e-12);
  clip_grad_norm<double>(params, before);
  EXPECT_NEAR(norm(), before / 2, 1e-12);
}

// Small dataset shaped like the desk default.
struct Fixture {
  Dataset data;
  ModelConfig model;
  TrainConfig train;
};

Fixture small_run(std::size_t train_samples = 64, std::size_t test_samples = 32) {
  Fixture f;
  GeneratorConfig g = GeneratorConfig::desk_default();
  g.train_samples = train_samples;
  g.test_samples = test_samples;
  g.seed = 11;
  f.data = generate_dataset(g);
  RunConfig rc;
  f.model = model_config_for(rc, f.data.modalities, f.data.num_labels());
  f.model.embed_dim = 16;
  f.model.depth = 1;
  f.model.heads = 2;
  f.train = rc.train;
  f.train.epochs = 2;
  f.model.sd_rate = f.train.sd_rate;
  return f;
}

std::vector<std::vector<float>> snapshot(const Model<float>& m) {
  std::vector<std::vector<float>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

TEST(Train, ZeroLearningRateKeepsParametersBitwise) {
  Fixture f = small_run();
  f.train.adam.lr = 0.0;
  auto model = Model<float>::build(f.model, 3);
  const auto before = snapshot(model);
  const auto r = train(model, train_split(f.data), test_split(f.data), f.train);
  EXPECT_EQ(snapshot(model), before);
  EXPECT_EQ(snapshot(r.best), before);
  EXPECT_EQ(r.history.size(), 2u);
}

TEST(Train, SameSeedSameTrajectory) {
  Fixture f = small_run();
  f.train.adam.lr = 1e-3;
  auto a = Model<float>::build(f.model, 3), b = Model<float>::build(f.model, 3);
  const auto ra = train(a, train_split(f.data), test_split(f.data), f.train);
  const auto rb = train(b, train_split(f.data), test_split(f.data), f.train);
  EXPECT_EQ(history_csv(ra.history), history_csv(rb.history));
  for (std::size_t e = 0; e < ra.history.size(); ++e) EXPECT_EQ(ra.history[e].train_loss, rb.history[e].train_loss);
  EXPECT_EQ(snapshot(a), snapshot(b));
  EXPECT_NE(snapshot(a), snapshot(Model<float>::build(f.model, 3)));
  f.train.seed = 1;
  auto c = Model<float>::build(f.model, 3);
  const auto rc = train(c, train_split(f.data), test_split(f.data), f.train);
  EXPECT_NE(rc.history[0].train_loss, ra.history[0].train_loss);
}

TEST(Train, BestCheckpointHasHighestMacroAp) {
  Fixture f = small_run();
  f.train.adam.lr = 1e-3;
  f.train.epochs = 3;
  auto m = Model<float>::build(f.model, 4);
  std::size_t calls = 0;
  const auto r = train(m, train_split(f.data), test_split(f.data), f.train,
                       [&](const EpochRecord& rec, const Model<float>&, const AdamState<float>& s) {
                         ++calls;
                         EXPECT_EQ(rec.epoch, calls);
                         EXPECT_EQ(s.step, calls * 2);  // 64 samples, batch 32
                       });
  EXPECT_EQ(calls, 3u);
  double best = -1.0;
  std::size_t arg = 0;
  for (const auto& h : r.history)
    if (h.metrics.ap_macro > best) best = h.metrics.ap_macro, arg = h.epoch;
  EXPECT_EQ(r.best_epoch, arg);
  EXPECT_DOUBLE_EQ(evaluate(r.best, test_split(f.data)).ap_macro, best);
}

TEST(Train, RejectsInconsistentInputs) {
  Fixture f = small_run();
  auto m = Model<float>::build(f.model, 1);
  TrainConfig t = f.train;
  t.sd_rate = 0.1;
  EXPECT_THROW(train(m, train_split(f.data), test_split(f.data), t), ConfigError);
  DatasetView empty{&f.data, 0, 0};
  EXPECT_THROW(train(m, empty, test_split(f.data), f.train), ConfigError);
  ModelConfig wrong = f.model;
  wrong.num_labels = 5;
  auto w = Model<float>::build(wrong, 1);
  EXPECT_THROW(train(w, train_split(f.data), test_split(f.data), f.train), ShapeError);
}

// Training mode with no stochastic depth is the eval forward pass.
TEST(TrainingMode, MatchesEvalWithoutStochasticDepth) {
  Fixture f = small_run(16, 4);
  f.model.sd_rate = 0.0;
  for (FusionMode mode : {FusionMode::kSct, FusionMode::kEarly}) {
    ModelConfig mc = f.model;
    mc.mode = mode;
    auto m = Model<float>::build(mc, 2);
    const auto binding = bind_inputs(mc, f.data);
    std::vector<std::size_t> idx(8);
    std::iota(idx.begin(), idx.end(), 0);
    const auto images = make_batch<float>(train_split(f.data), idx, binding);
    Rng r1(1), r2(2);
    const auto a = m.forward(images, true, r1), b = m.forward(images, false, r2);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-6);
  }
}

TEST(BatchLoss, InvariantToSampleOrder) {
  Fixture f = small_run(16, 4);
  auto m = Model<float>::build(f.model, 2);
  const auto binding = bind_inputs(f.model, f.data);
  std::vector<std::size_t> idx(12);
  std::iota(idx.begin(), idx.end(), 0);
  auto loss = [&](std::span<const std::size_t> order) {
    NoGradGuard guard;
    Rng rng(0);
    const auto images = make_batch<float>(train_split(f.data), order, binding);
    return static_cast<double>(bce_with_logits(m.forward(images, false, rng), batch_targets(train_split(f.data), order)).item());
  };
  const double base = loss(idx);
  std::mt19937_64 gen(8);
  for (int t = 0; t < 5; ++t) {
    std::shuffle(idx.begin(), idx.end(), gen);
    EXPECT_NEAR(loss(idx), base, 1e-6);
  }
}

TEST(MakeBatch, StacksSamplesInOrder) {
  Fixture f = small_run(8, 2);
  const auto binding = bind_inputs(f.model, f.data);
  const std::size_t idx[] = {5, 2};
  const auto images = make_batch<double>(train_split(f.data), idx, binding);
  ASSERT_EQ(images.size(), 2u);
  EXPECT_EQ(images[1].shape(), (Shape{2, 30, 30, 3}));
  const auto& s = f.data.samples[2].images[1];
  for (std::size_t i = 0; i < s.size(); ++i) ASSERT_EQ(images[1].data()[s.size() + i], static_cast<double>(s[i]));
  const auto y = batch_targets(train_split(f.data), idx);
  EXPECT_TRUE(std::equal(y.begin() + 12, y.end(), f.data.samples[2].labels.begin()));
  AugmentConfig a;
  EXPECT_THROW(make_batch<double>(train_split(f.data), idx, binding, &a, nullptr), ConfigError);
}

TEST(BindInputs, ResolvesByNameAndRejectsGeometry) {
  Fixture f = small_run(8, 2);
  ModelConfig swapped = f.model;
  std::swap(swapped.modalities[0], swapped.modalities[1]);
  EXPECT_EQ(bind_inputs(swapped, f.data).dataset_index, (std::vector<std::size_t>{1, 0}));
  ModelConfig wrong = f.model;
  wrong.modalities[1].height = 20;
  wrong.modalities[1].patch_size = 5;
  try {
    bind_inputs(wrong, f.data);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("s2"), std::string::npos) << e.what();
  }
}

// Non-interpolated AP of a constant score: input order is the ranking.
double input_order_ap(const ScoreMatrix& m, std::size_t k) {
  double total = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < m.samples; ++i)
    if (m.targets[i * m.labels + k]) total += static_cast<double>(++hits) / static_cast<double>(i + 1);
  return total / static_cast<double>(hits);
}

TEST(Evaluate, ZeroHeadGivesTieRuleBaseline) {
  Fixture f = small_run(8, 40);
  auto m = Model<float>::build(f.model, 5);
  for (float& w : m.head().weight.mutable_data()) w = 0.0f;
  for (float& b : m.head().bias.mutable_data()) b = 0.0f;
  const ScoreMatrix s = predict_scores(m, test_split(f.data));
  for (double v : s.scores) EXPECT_EQ(v, 0.5);
  const MetricsReport r = evaluate(m, test_split(f.data));
  double macro = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < 12; ++k) {
    if (!r.per_label_ap[k]) continue;
    EXPECT_NEAR(*r.per_label_ap[k], input_order_ap(s, k), 1e-12);
    EXPECT_DOUBLE_EQ(r.per_label_recall[k], 1.0);  // 0.5 >= threshold
    macro += input_order_ap(s, k);
    ++used;
  }
  EXPECT_NEAR(r.ap_macro, macro / used, 1e-12);
}

TEST(Evaluate, PerfectScoresAndDeterminism) {
  Fixture f = small_run(8, 40);
  auto m = Model<float>::build(f.model, 5);
  ScoreMatrix s = predict_scores(m, test_split(f.data));
  for (std::size_t i = 0; i < s.scores.size(); ++i) s.scores[i] = s.targets[i];
  const MetricsReport perfect = compute_metrics(s);
  EXPECT_DOUBLE_EQ(perfect.ap_micro, 1.0);
  EXPECT_DOUBLE_EQ(perfect.ap_macro, 1.0);
  EXPECT_DOUBLE_EQ(perfect.f2_macro, 1.0);
  EXPECT_EQ(to_json(evaluate(m, test_split(f.data))).dump(), to_json(evaluate(m, test_split(f.data), 2.0, 0.5, 7)).dump());
  DatasetView empty{&f.data, 0, 0};
  EXPECT_THROW(evaluate(m, empty), Error);
}

TEST(HistoryCsv, HeaderAndRows) {
  EpochRecord r;
  r.epoch = 3;
  r.train_loss = 0.5;
  r.metrics.ap_micro = 0.25;
  r.metrics.ap_macro = 0.125;
  r.metrics.f2_macro = 1.0;
  EXPECT_EQ(history_csv({r}), "epoch,train_loss,ap_micro,ap_macro,f2_macro\n3,0.500000,0.250000,0.125000,1.000000\n");
}

// Default tiny SCT (d_e=32, depth 2, 4 heads, sd 0.25, lr 1e-4) on the
// default synthetic data: the first five epoch losses fall in most seeds.
TEST(Train, LossDecreasesOverFirstEpochs) {
  std::size_t good = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RunConfig rc;
    set_run_seed(rc, seed);
    rc.train.epochs = 5;
    const Dataset data = generate_dataset(rc.data);
    const ModelConfig mc = rc.model_config();
    auto m = Model<float>::build(mc, derive_seed(seed, SeedPurpose::kInit));
    const auto r = train(m, train_split(data), test_split(data), rc.train);
    bool down = true;
    std::string losses;
    for (std::size_t e = 0; e < 5; ++e) {
      losses += std::to_string(r.history[e].train_loss) + " ";
      if (e > 0 && !(r.history[e].train_loss < r.history[e - 1].train_loss)) down = false;
    }
    std::cout << "seed " << seed << ": " << losses << (down ? "decreasing" : "not monotone") << "\n";
    good += down;
  }
  EXPECT_GE(good, 4u);
}

}  // namespace
}  // namespace sct
