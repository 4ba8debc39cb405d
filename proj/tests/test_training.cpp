#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fcdrn/train.hpp"
#include "oracles.hpp"

using namespace fcdrn;

namespace {

Var<double> scalar_param(double v) { return Var<double>(Tensor<double>({1, 1, 1, 1}, v), true); }

void set_grad(Var<double>& p, double g) {
  p.zero_grad();
  p.mutable_grad()[0] = g;
}

Dataset tiny_synthetic(int count, int start, std::uint64_t seed = 5) {
  SyntheticSpec s;
  s.height = 32;
  s.width = 32;
  s.classes = 3;
  s.count = count;
  s.start_index = start;
  s.seed = seed;
  return generate_synthetic(s);
}

ModelGraph<float> tiny_model(std::uint64_t seed = 1) {
  ChannelPlan plan;
  plan.scale = 0.1;
  plan.blocks_per_stage = 1;
  plan.classes = 3;
  return ModelGraph<float>::build(VariantSpec{}, plan, seed);
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.crop_h = 32;
  c.crop_w = 32;
  c.batch_size = 4;
  c.max_epochs = 2;
  c.seed = 11;
  return c;
}

}  // namespace

TEST(RmsProp, ZeroGradientFreshStateLeavesParamsUnchanged) {
  auto p = scalar_param(0.7);
  RmsProp<double> opt({{"p", p}}, {});
  set_grad(p, 0.0);
  opt.step(1e-3);
  EXPECT_EQ(p.value()[0], 0.7);
}

TEST(RmsProp, FirstStepMatchesHandEvaluation) {
  auto p = scalar_param(0.0);
  RmsProp<double> opt({{"p", p}}, {0.9, 1e-8, 0.0});
  set_grad(p, 1.0);
  opt.step(1e-3);
  EXPECT_NEAR(p.value()[0], -1e-3 / (std::sqrt(0.1) + 1e-8), 1e-15);
}

TEST(RmsProp, ConstantGradientStepApproachesLearningRate) {
  auto p = scalar_param(0.0);
  RmsProp<double> opt({{"p", p}}, {});
  double prev = 0.0, step = 0.0;
  for (int i = 0; i < 400; ++i) {
    set_grad(p, 2.5);
    opt.step(1e-3);
    step = prev - p.value()[0];
    prev = p.value()[0];
  }
  EXPECT_NEAR(step, 1e-3, 1e-9);
}

TEST(RmsProp, ZeroLearningRateChangesNothing) {
  auto p = scalar_param(0.3);
  RmsProp<double> opt({{"p", p}}, {0.9, 1e-8, 1e-4});
  set_grad(p, 5.0);
  opt.step(0.0);
  EXPECT_EQ(p.value()[0], 0.3);
}

TEST(RmsProp, WeightDecayAloneShrinksMagnitudeMonotonically) {
  Var<double> p(Tensor<double>({1, 1, 1, 3}, std::vector<double>{0.5, -2.0, 1e-3}), true);
  RmsProp<double> opt({{"p", p}}, {0.9, 1e-8, 1e-4});
  auto last = p.value();
  for (int i = 0; i < 50; ++i) {
    opt.zero_grad();
    opt.step(1e-4);
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_LT(std::abs(p.value()[j]), std::abs(last[j]));
      EXPECT_EQ(std::signbit(p.value()[j]), std::signbit(last[j]));
    }
    last = p.value();
  }
}

TEST(RmsProp, NonFiniteGradientAbortsBeforeAnyUpdate) {
  auto a = scalar_param(1.0);
  auto b = scalar_param(2.0);
  RmsProp<double> opt({{"a", a}, {"b", b}}, {});
  set_grad(a, 1.0);
  set_grad(b, std::nan(""));
  EXPECT_THROW(opt.step(1e-3), NumericalError);
  EXPECT_EQ(a.value()[0], 1.0);
  EXPECT_EQ(b.value()[0], 2.0);
}

TEST(RmsProp, StateIsNonNegativeAndRestorable) {
  auto p = scalar_param(0.0);
  RmsProp<double> opt({{"p", p}}, {});
  set_grad(p, -3.0);
  opt.step(1e-3);
  std::map<std::string, Tensor<double>> saved;
  opt.visit_state([&](const std::string& n, Tensor<double>& t) {
    EXPECT_GE(t[0], 0.0);
    saved.emplace(n, t);
  });
  EXPECT_NEAR(saved.at("p")[0], 0.9, 1e-12);
  auto q = scalar_param(5.0);
  RmsProp<double> opt2({{"p", q}}, {});
  opt2.load_state(saved);
  const double p0 = p.value()[0], q0 = q.value()[0];
  set_grad(p, 1.0);
  set_grad(q, 1.0);
  opt.step(1e-3);
  opt2.step(1e-3);
  EXPECT_NEAR(p.value()[0] - p0, q.value()[0] - q0, 1e-15);
}

TEST(RmsProp, RejectsBadConfig) {
  auto p = scalar_param(0.0);
  EXPECT_THROW(RmsProp<double>({{"p", p}}, {1.0, 1e-8, 0.0}), Error);
  EXPECT_THROW(RmsProp<double>({{"p", p}}, {0.9, 0.0, 0.0}), Error);
}

TEST(Schedule, ExponentialDecay) {
  EXPECT_DOUBLE_EQ(lr_at_epoch(1e-3, 0.995, 0), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at_epoch(1e-3, 0.995, 1), 9.95e-4);
  double direct = 1e-3;
  for (int i = 0; i < 200; ++i) direct *= 0.995;
  EXPECT_NEAR(lr_at_epoch(1e-3, 0.995, 200), direct, 1e-15);
  EXPECT_NEAR(lr_at_epoch(1e-3, 0.995, 200), 3.67e-4, 5e-7);
  EXPECT_THROW(lr_at_epoch(1e-3, 0.995, -1), Error);
}

TEST(EarlyStoppingRule, PatienceTwoExample) {
  EarlyStopping s(2);
  const double seq[] = {0.3, 0.4, 0.39, 0.38};
  std::vector<bool> stops;
  for (int e = 1; e <= 4; ++e) stops.push_back(s.update(e, seq[e - 1]));
  EXPECT_EQ(stops, (std::vector<bool>{false, false, false, true}));
  EXPECT_EQ(s.best_epoch(), 2);
}

TEST(EarlyStoppingRule, TiesAreNotImprovements) {
  EarlyStopping s(1);
  EXPECT_FALSE(s.update(1, 0.5));
  EXPECT_TRUE(s.update(2, 0.5));
  EXPECT_EQ(s.best_epoch(), 1);
}

TEST(Augment, CropBoundsAndAlignment) {
  SegmentationSample s{Tensor<float>({1, 3, 360, 480}), LabelMap({1, 1, 360, 480}), "s"};
  for (int y = 0; y < 360; ++y)
    for (int x = 0; x < 480; ++x) {
      s.image.at(0, 0, y, x) = static_cast<float>(y * 1000 + x);
      s.labels.at(0, 0, y, x) = y * 1000 + x;
    }
  Rng rng(1);
  int min_y = 999, max_y = -1, min_x = 999, max_x = -1, flips = 0;
  for (int i = 0; i < 400; ++i) {
    CropOffsets off;
    auto c = augment(s, 324, 324, 0.5, rng, &off);
    ASSERT_EQ(c.image.shape(), (Shape{1, 3, 324, 324}));
    ASSERT_EQ(c.labels.shape(), (Shape{1, 1, 324, 324}));
    min_y = std::min(min_y, off.y);
    max_y = std::max(max_y, off.y);
    min_x = std::min(min_x, off.x);
    max_x = std::max(max_x, off.x);
    flips += off.flipped;
    const int src_x = off.flipped ? off.x + 323 : off.x;
    EXPECT_EQ(c.labels.at(0, 0, 0, 0), off.y * 1000 + src_x);
    for (int p : {0, 17, 323}) EXPECT_EQ(c.image.at(0, 0, p, p), static_cast<float>(c.labels.at(0, 0, p, p)));
  }
  EXPECT_GE(min_y, 0);
  EXPECT_LE(max_y, 36);
  EXPECT_GE(min_x, 0);
  EXPECT_LE(max_x, 156);
  EXPECT_GT(max_x, 120);
  EXPECT_NEAR(flips, 200, 45);
  EXPECT_THROW(augment(s, 361, 10, 0.5, rng), DataError);
}

TEST(Augment, FlipIsAnInvolution) {
  auto d = tiny_synthetic(1, 0);
  auto s = d.samples[0];
  hflip_inplace(s);
  EXPECT_NE(s.labels, d.samples[0].labels);
  hflip_inplace(s);
  EXPECT_EQ(s.image, d.samples[0].image);
  EXPECT_EQ(s.labels, d.samples[0].labels);
}

TEST(SoftTargets, ValuesAndVoid) {
  LabelMap l({1, 1, 1, 2}, std::vector<int32_t>{1, 3});
  auto t = soften(l, 3, 3);
  EXPECT_FLOAT_EQ(t.at(0, 0, 0, 0), 0.01f);
  EXPECT_FLOAT_EQ(t.at(0, 1, 0, 0), 0.9f);
  EXPECT_FLOAT_EQ(t.at(0, 2, 0, 0), 0.01f);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(t.at(0, c, 0, 1), 0.0f);

  LabelMap one({1, 1, 1, 1}, std::vector<int32_t>{4});
  auto t11 = soften(one, 11, 11);
  double sum = 0.0;
  for (int c = 0; c < 11; ++c) sum += t11.at(0, c, 0, 0);
  EXPECT_NEAR(sum, 1.0, 1e-6);
}

TEST(SoftTargets, LossBoundedBelowByEntropy) {
  LabelMap l({1, 1, 1, 1}, std::vector<int32_t>{2});
  const auto target = soften(l, 4, 4).cast<double>();
  double mass = 0.0, entropy = 0.0;
  for (int c = 0; c < 4; ++c) mass += target[c];
  EXPECT_NEAR(mass, 0.93, 1e-6);
  for (int c = 0; c < 4; ++c) entropy -= target[c] * std::log(target[c] / mass);
  Rng rng(3);
  // Logits equal to log(target) reproduce the normalised soft target, which minimises the loss.
  Tensor<double> best({1, 4, 1, 1});
  for (int c = 0; c < 4; ++c) best[c] = std::log(target[c]);
  const double at_min = softmax_cross_entropy<double>(nullptr, Var<double>(best), target).value()[0];
  for (int i = 0; i < 50; ++i) {
    auto logits = random_tensor<double>({1, 4, 1, 1}, rng, -4, 4);
    const double loss = softmax_cross_entropy<double>(nullptr, Var<double>(logits), target).value()[0];
    EXPECT_GE(loss, at_min - 1e-12);
  }
  EXPECT_NEAR(at_min, entropy, 1e-9);
}

TEST(Train, ConfigValidation) {
  TrainConfig c;
  c.patience = 0;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.lr_decay = 1.5;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Train, EmptyDatasetsRejected) {
  auto m = tiny_model();
  Dataset empty;
  auto d = tiny_synthetic(2, 0);
  EXPECT_THROW(train(m, empty, d, tiny_config()), DataError);
  EXPECT_THROW(train(m, d, empty, tiny_config()), DataError);
}

TEST(Train, DeterministicHistoryAndBestTracking) {
  auto tr = tiny_synthetic(8, 0);
  auto va = tiny_synthetic(4, 100);
  auto m1 = tiny_model();
  auto m2 = tiny_model();
  auto r1 = train(m1, tr, va, tiny_config());
  auto r2 = train(m2, tr, va, tiny_config());
  ASSERT_EQ(r1.history.size(), 2u);
  std::ostringstream a, b;
  write_history_csv(a, r1.history, false);
  write_history_csv(b, r2.history, false);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(r1.status, TrainStatus::MaxEpochs);
  EXPECT_GE(r1.best_epoch, 1);
  EXPECT_DOUBLE_EQ(r1.best_val_miou, std::max(r1.history[0].val_miou, r1.history[1].val_miou));
  EXPECT_DOUBLE_EQ(evaluate(r1.best, va).miou(), r1.best_val_miou);
  for (const auto& r : r1.history) EXPECT_TRUE(std::isfinite(r.train_loss));
}

TEST(Train, ResumeReplaysUninterruptedRun) {
  auto tr = tiny_synthetic(6, 0);
  auto va = tiny_synthetic(3, 100);
  auto cfg = tiny_config();
  cfg.max_epochs = 3;
  auto full = tiny_model();
  auto r_full = train(full, tr, va, cfg);

  auto part = tiny_model();
  cfg.max_epochs = 1;
  auto r1 = train(part, tr, va, cfg);
  cfg.max_epochs = 3;
  TrainOptions<float> opt;
  opt.start_epoch = 1;
  opt.optimizer_state = &r1.optimizer_state;
  auto r2 = train(part, tr, va, cfg, opt);
  ASSERT_EQ(r2.history.size(), 2u);
  EXPECT_EQ(r2.history.back().train_loss, r_full.history.back().train_loss);
  EXPECT_EQ(part.infer(va.samples[0].image), full.infer(va.samples[0].image));
}

TEST(Train, SoftTargetsGiveFiniteLosses) {
  auto tr = tiny_synthetic(4, 0);
  auto va = tiny_synthetic(2, 100);
  auto m = tiny_model();
  auto cfg = tiny_config();
  cfg.soft_targets = true;
  auto r = train(m, tr, va, cfg);
  for (const auto& e : r.history) EXPECT_TRUE(std::isfinite(e.train_loss));
}

TEST(Train, StopCallbackAndPatience) {
  auto tr = tiny_synthetic(4, 0);
  auto va = tiny_synthetic(2, 100);
  auto m = tiny_model();
  auto cfg = tiny_config();
  cfg.max_epochs = 10;
  TrainOptions<float> opt;
  opt.stop = [](const EpochRecord& r) { return r.epoch == 2; };
  auto r = train(m, tr, va, cfg, opt);
  EXPECT_EQ(r.status, TrainStatus::Stopped);
  EXPECT_EQ(r.history.size(), 2u);

  cfg.patience = 1;
  cfg.lr0 = 1e-12;  // frozen weights: validation score never strictly improves after epoch 1
  cfg.dropout = 0.0;
  auto m2 = tiny_model();
  auto r2 = train(m2, tr, va, cfg);
  EXPECT_EQ(r2.status, TrainStatus::EarlyStopped);
  EXPECT_EQ(r2.history.size(), 2u);
}

TEST(Train, DivergenceRestoresLastGoodWeights) {
  auto tr = tiny_synthetic(4, 0);
  auto va = tiny_synthetic(2, 100);
  auto m = tiny_model();
  const auto before = m.infer(va.samples[0].image);
  auto cfg = tiny_config();
  cfg.lr0 = 1e30;
  auto r = train(m, tr, va, cfg);
  EXPECT_EQ(r.status, TrainStatus::Diverged);
  EXPECT_FALSE(r.message.empty());
  EXPECT_EQ(m.infer(va.samples[0].image), r.best.infer(va.samples[0].image));
  if (r.best_epoch == 0) {
    EXPECT_EQ(m.infer(va.samples[0].image), before);
  }
}

TEST(Train, SingleBatchLossDecreases) {
  auto tr = tiny_synthetic(4, 0);
  auto m = tiny_model();
  auto batch = stack(tr.samples);
  RmsProp<float> opt(named_parameters(m), {0.9, 1e-8, 0.0});
  Rng drop(1);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 30; ++i) {
    Tape<float> tape;
    ForwardContext<float> ctx{&tape, Mode::Train, &drop, 0.0, DropoutKind::Element};
    auto loss = softmax_cross_entropy(&tape, m.forward(ctx, Var<float>(batch.image)), batch.labels, 3);
    opt.zero_grad();
    tape.backward(loss);
    opt.step(1e-3);
    (i == 0 ? first : last) = loss.value()[0];
  }
  EXPECT_LT(last, first);
}
