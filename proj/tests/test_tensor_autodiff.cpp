#include <gtest/gtest.h>

#include <cmath>

#include "fcdrn/conv.hpp"
#include "fcdrn/loss.hpp"
#include "fcdrn/ops.hpp"
#include "gradient_suite.hpp"
#include "oracles.hpp"

using namespace fcdrn;

namespace {

Tensor<double> iota_tensor(Shape s) {
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i + 1);
  return t;
}

}  // namespace

TEST(Conv2d, IdentityKernelReproducesInput) {
  Var<double> x(iota_tensor({1, 1, 5, 5}));
  Tensor<double> w({1, 1, 3, 3});
  w.at(0, 0, 1, 1) = 1.0;
  auto y = conv2d<double>(nullptr, x, Var<double>(w), Var<double>(Tensor<double>({1, 1, 1, 1})), {1, 1, 1});
  EXPECT_EQ(y.value(), x.value());
}

TEST(Conv2d, AllOnesSumsMatchNestedLoopOracle) {
  Tensor<double> x({1, 1, 5, 5}, 1.0);
  Tensor<double> w({1, 1, 3, 3}, 1.0);
  auto y = conv2d<double>(nullptr, Var<double>(x), Var<double>(w), {}, {1, 1, 1});
  const auto expected = oracle::naive_conv2d<double>(x, w, nullptr, ConvGeometry{1, 1, 1});
  EXPECT_EQ(y.value(), expected);
  EXPECT_DOUBLE_EQ(y.value().at(0, 0, 2, 2), 9.0);
  EXPECT_DOUBLE_EQ(y.value().at(0, 0, 0, 0), 4.0);
  EXPECT_DOUBLE_EQ(y.value().at(0, 0, 4, 4), 4.0);
  EXPECT_DOUBLE_EQ(y.value().at(0, 0, 0, 2), 6.0);
}

TEST(Conv2d, DilatedSamePaddingKeepsSize) {
  Rng rng(3);
  auto x = random_tensor<double>({1, 1, 7, 7}, rng);
  auto y = conv2d<double>(nullptr, Var<double>(x), Var<double>(random_tensor<double>({1, 1, 3, 3}, rng)), {}, {1, 2, 2});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 7, 7}));
}

TEST(Conv2d, MatchesNaiveOracleOnRandomGeometries) {
  Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const int k = trial % 2 == 0 ? 3 : 1;
    const int dilation = uniform_int(rng, 1, 3);
    const int stride = dilation == 1 ? uniform_int(rng, 1, 2) : 1;
    const ConvGeometry g{stride, dilation, uniform_int(rng, 0, 3)};
    const Shape xs{uniform_int(rng, 1, 2), uniform_int(rng, 1, 4), uniform_int(rng, 7, 12), uniform_int(rng, 7, 12)};
    auto x = random_tensor<double>(xs, rng);
    auto w = random_tensor<double>({uniform_int(rng, 1, 5), xs.c, k, k}, rng);
    auto b = random_tensor<double>({1, w.n(), 1, 1}, rng);
    auto y = conv2d<double>(nullptr, Var<double>(x), Var<double>(w), Var<double>(b), g);
    auto ref = oracle::naive_conv2d(x, w, &b, g);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LT(max_abs_diff(y.value(), ref), 1e-12);
  }
}

TEST(Conv2d, SamePaddingPreservesSpatialSizeForAnyOddKernelAndDilation) {
  Rng rng(9);
  for (int k : {1, 3, 5}) {
    for (int d : {1, 2, 3, 4, 8}) {
      Shape xs{1, 2, 17, 11};
      auto y = conv2d<float>(nullptr, Var<float>(random_tensor<float>(xs, rng)),
                             Var<float>(random_tensor<float>({3, 2, k, k}, rng)), {}, {1, d, same_padding(k, d)});
      EXPECT_EQ(y.shape().h, 17);
      EXPECT_EQ(y.shape().w, 11);
    }
  }
}

TEST(Conv2d, RejectsBadInputs) {
  Var<double> x(Tensor<double>({1, 2, 4, 4}, 1.0));
  EXPECT_THROW(conv2d<double>(nullptr, x, Var<double>(Tensor<double>({1, 3, 3, 3})), {}, {}), ShapeError);
  EXPECT_THROW(conv2d<double>(nullptr, x, Var<double>(Tensor<double>({1, 2, 3, 3})), {}, {1, 4, 0}), ShapeError);
  Tensor<double> bad({1, 2, 4, 4}, 1.0);
  bad[3] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(conv2d<double>(nullptr, Var<double>(bad), Var<double>(Tensor<double>({1, 2, 1, 1}, 1.0)), {}, {}),
               NumericalError);
}

TEST(MaxPool, SmallExamples) {
  Var<double> x(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
  auto r = maxpool2d<double>(nullptr, x);
  EXPECT_EQ(r.output.value().to_vector(), std::vector<double>{4});
  EXPECT_EQ(r.argmax, std::vector<std::size_t>{3});

  auto r5 = maxpool2d<double>(nullptr, Var<double>(iota_tensor({1, 1, 5, 5})));
  EXPECT_EQ(r5.output.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(r5.output.value().to_vector(), (std::vector<double>{7, 9, 17, 19}));
  EXPECT_THROW(maxpool2d<double>(nullptr, Var<double>(Tensor<double>({1, 1, 1, 4}))), ShapeError);
}

TEST(MaxPool, EqualsWindowScanOnAllSizesUpToSix) {
  Rng rng(21);
  for (int h = 2; h <= 6; ++h) {
    for (int w = 2; w <= 6; ++w) {
      auto x = random_tensor<double>({2, 2, h, w}, rng);
      auto r = maxpool2d<double>(nullptr, Var<double>(x));
      EXPECT_EQ(r.output.value(), oracle::window_scan_maxpool(x)) << h << "x" << w;
    }
  }
}

TEST(Upsample, RepeatAndIndexMap) {
  Var<double> x(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
  auto y4 = upsample_nearest<double>(nullptr, x, 4, 4);
  EXPECT_EQ(y4.value().to_vector(), (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
  auto y3 = upsample_nearest<double>(nullptr, x, 3, 3);
  EXPECT_EQ(y3.value().to_vector(), (std::vector<double>{1, 1, 2, 1, 1, 2, 3, 3, 4}));
  auto same = upsample_nearest<double>(nullptr, x, 2, 2);
  EXPECT_EQ(same.value(), x.value());
  EXPECT_THROW(upsample_nearest<double>(nullptr, x, 1, 2), ShapeError);
}

TEST(BatchNorm, NormalizedInputIsAFixedPoint) {
  // Per channel: values {-1, 1} repeated, mean 0 and biased variance 1.
  Tensor<double> x({2, 2, 1, 2}, {-1, 1, 1, -1, 1, -1, -1, 1});
  auto state = BatchNormState<double>::fresh(2);
  auto y = batchnorm<double>(nullptr, Var<double>(x), Var<double>(Tensor<double>({1, 2, 1, 1}, 1.0)),
                             Var<double>(Tensor<double>({1, 2, 1, 1}, 0.0)), state, Mode::Train);
  EXPECT_LT(max_abs_diff(y.value(), x), 1e-5);
}

TEST(BatchNorm, TrainModeStatisticsMatchTwoPassOracle) {
  Rng rng(31);
  auto x = random_tensor<double>({4, 3, 2, 2}, rng, -2, 5);
  auto state = BatchNormState<double>::fresh(3);
  auto y = batchnorm<double>(nullptr, Var<double>(x), Var<double>(Tensor<double>({1, 3, 1, 1}, 1.0)),
                             Var<double>(Tensor<double>({1, 3, 1, 1}, 0.0)), state, Mode::Train);
  const auto in_stats = oracle::two_pass_stats(x);
  const auto out_stats = oracle::two_pass_stats(y.value());
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(out_stats.mean[c], 0.0, 1e-5);
    EXPECT_NEAR(out_stats.var[c], 1.0, 1e-3);
    for (int n = 0; n < 4; ++n) {
      const double expected = (x.at(n, c, 1, 0) - in_stats.mean[c]) / std::sqrt(in_stats.var[c] + 1e-5);
      EXPECT_NEAR(y.value().at(n, c, 1, 0), expected, 1e-12);
    }
    EXPECT_NEAR(state.running_mean[c], 0.1 * in_stats.mean[c], 1e-12);
    EXPECT_NEAR(state.running_var[c], 0.9 + 0.1 * in_stats.var[c] * 16.0 / 15.0, 1e-12);
  }
}

TEST(BatchNorm, EvalModeUsesRunningStatsAndZeroVarianceStaysFinite) {
  auto state = BatchNormState<double>::fresh(1);
  state.running_mean[0] = 2.0;
  state.running_var[0] = 4.0;
  Tensor<double> x({1, 1, 1, 2}, {2.0, 4.0});
  auto y = batchnorm<double>(nullptr, Var<double>(x), Var<double>(Tensor<double>({1, 1, 1, 1}, 1.0)),
                             Var<double>(Tensor<double>({1, 1, 1, 1}, 0.0)), state, Mode::Eval);
  EXPECT_NEAR(y.value()[1], 2.0 / std::sqrt(4.0 + 1e-5), 1e-12);

  auto flat_state = BatchNormState<double>::fresh(1);
  auto flat = batchnorm<double>(nullptr, Var<double>(Tensor<double>({2, 1, 2, 2}, 3.0)),
                                Var<double>(Tensor<double>({1, 1, 1, 1}, 1.0)),
                                Var<double>(Tensor<double>({1, 1, 1, 1}, 0.0)), flat_state, Mode::Train);
  EXPECT_TRUE(flat.value().all_finite());
  EXPECT_EQ(flat.value()[0], 0.0);
}

TEST(Elementwise, DropoutConcatAndAdd) {
  Rng rng(41);
  Var<double> x(random_tensor<double>({2, 3, 4, 4}, rng));
  EXPECT_EQ(dropout<double>(nullptr, x, 0.0, Mode::Train, rng).value(), x.value());
  EXPECT_EQ(dropout<double>(nullptr, x, 0.5, Mode::Eval, rng).value(), x.value());
  EXPECT_THROW(dropout<double>(nullptr, x, 1.0, Mode::Train, rng), Error);
  EXPECT_THROW(dropout<double>(nullptr, x, -0.1, Mode::Train, rng), Error);

  Var<double> a(random_tensor<double>({2, 3, 4, 4}, rng));
  Var<double> b(random_tensor<double>({2, 5, 4, 4}, rng));
  auto c = concat_channels<double>(nullptr, std::vector<Var<double>>{a, b});
  EXPECT_EQ(c.shape().c, 8);
  EXPECT_EQ(slice_channels(c.value(), 0, 3), a.value());
  EXPECT_EQ(slice_channels(c.value(), 3, 5), b.value());
  EXPECT_THROW(concat_channels<double>(nullptr, std::vector<Var<double>>{a, Var<double>(Tensor<double>({2, 1, 3, 4}))}),
               ShapeError);
  EXPECT_THROW(add<double>(nullptr, a, b), ShapeError);
}

TEST(Elementwise, ConcatThenSliceRecoversEveryInput) {
  Rng rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Var<float>> parts;
    const int h = uniform_int(rng, 1, 5), w = uniform_int(rng, 1, 5);
    for (int i = 0; i < uniform_int(rng, 1, 5); ++i) {
      parts.emplace_back(random_tensor<float>({2, uniform_int(rng, 1, 4), h, w}, rng));
    }
    auto cat = concat_channels<float>(nullptr, parts);
    int offset = 0;
    for (const auto& p : parts) {
      EXPECT_EQ(slice_channels(cat.value(), offset, p.shape().c), p.value());
      offset += p.shape().c;
    }
  }
}

TEST(Elementwise, DropoutPreservesMeanInExpectation) {
  // Each trial's output mean has variance p / (1 - p) * E[x^2] / numel; average over trials.
  Rng rng(47);
  Var<double> x(random_tensor<double>({1, 4, 8, 8}, rng, 0.0, 2.0));
  double ex2 = 0, mean_x = 0;
  for (double v : x.value().values()) {
    ex2 += v * v;
    mean_x += v;
  }
  const double numel = static_cast<double>(x.value().size());
  ex2 /= numel;
  mean_x /= numel;
  const int trials = 400;
  double acc = 0.0;
  for (int t = 0; t < trials; ++t) {
    auto y = dropout<double>(nullptr, x, 0.2, Mode::Train, rng);
    double m = 0;
    for (double v : y.value().values()) m += v;
    acc += m / numel;
  }
  const double sigma = std::sqrt(0.2 / 0.8 * ex2 / numel / trials);
  EXPECT_NEAR(acc / trials, mean_x, 3 * sigma);
}

TEST(Elementwise, ChannelDropoutZeroesWholePlanes) {
  Rng rng(48);
  Var<double> x(Tensor<double>({2, 6, 3, 3}, 1.0));
  auto y = dropout<double>(nullptr, x, 0.5, Mode::Train, rng, DropoutKind::Channel);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 6; ++c) {
      const double first = y.value().at(n, c, 0, 0);
      EXPECT_TRUE(first == 0.0 || first == 2.0);
      for (int i = 0; i < 9; ++i) EXPECT_EQ(y.value().plane(n, c)[i], first);
    }
}

TEST(Loss, UniformLogitsGiveLogK) {
  Var<double> logits(Tensor<double>({1, 11, 2, 3}, 0.25));
  LabelMap labels({1, 1, 2, 3}, 4);
  auto loss = softmax_cross_entropy<double>(nullptr, logits, labels, 11);
  EXPECT_NEAR(loss.value()[0], std::log(11.0), 1e-12);
  EXPECT_NEAR(loss.value()[0], 2.3979, 1e-4);
}

TEST(Loss, LargeMarginDrivesLossToZero) {
  Tensor<double> t({1, 3, 1, 1}, {0.0, 60.0, 0.0});
  auto loss = softmax_cross_entropy<double>(nullptr, Var<double>(t), LabelMap({1, 1, 1, 1}, 1));
  EXPECT_LT(loss.value()[0], 1e-20);
}

TEST(Loss, MatchesPerPixelLogSumExpOracle) {
  Rng rng(53);
  auto logits = random_tensor<double>({1, 3, 2, 2}, rng, -4, 4);
  LabelMap labels({1, 1, 2, 2}, {0, 2, 1, 2});
  double expected = 0;
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      double z = 0;
      for (int c = 0; c < 3; ++c) z += std::exp(logits.at(0, c, y, x));
      expected += std::log(z) - logits.at(0, labels.at(0, 0, y, x), y, x);
    }
  auto loss = softmax_cross_entropy<double>(nullptr, Var<double>(logits), labels);
  EXPECT_NEAR(loss.value()[0], expected / 4, 1e-12);
}

TEST(Loss, VoidPixelsContributeNothing) {
  Rng rng(59);
  Var<double> logits(random_tensor<double>({1, 4, 2, 2}, rng), true);
  LabelMap labels({1, 1, 2, 2}, {0, 11, 3, 11});
  Tape<double> tape;
  auto loss = softmax_cross_entropy(&tape, logits, labels, 11);
  tape.backward(loss);
  for (int c = 0; c < 4; ++c) {
    EXPECT_EQ(logits.grad().at(0, c, 0, 1), 0.0);
    EXPECT_EQ(logits.grad().at(0, c, 1, 1), 0.0);
  }
  LabelMap only_valid({1, 1, 1, 2}, {0, 3});
  Tensor<double> valid_logits({1, 4, 1, 2});
  for (int c = 0; c < 4; ++c) {
    valid_logits.at(0, c, 0, 0) = logits.value().at(0, c, 0, 0);
    valid_logits.at(0, c, 0, 1) = logits.value().at(0, c, 1, 0);
  }
  EXPECT_NEAR(loss.value()[0], softmax_cross_entropy<double>(nullptr, Var<double>(valid_logits), only_valid).value()[0],
              1e-12);
  EXPECT_THROW(softmax_cross_entropy<double>(nullptr, logits, LabelMap({1, 1, 2, 2}, 4), 11), DataError);
}

TEST(Backward, SumGivesOnes) {
  Var<double> x(Tensor<double>({2, 3, 2, 2}, 0.5), true);
  Tape<double> tape;
  tape.backward(sum(&tape, x));
  EXPECT_EQ(x.grad(), Tensor<double>(x.shape(), 1.0));
  EXPECT_EQ(tape.size(), 0U);
}

TEST(Backward, TwoConsumersAccumulate) {
  Var<double> x(Tensor<double>({1, 1, 2, 2}, 1.0), true);
  Tape<double> tape;
  auto y = add(&tape, x, x);
  tape.backward(sum(&tape, y));
  EXPECT_EQ(x.grad(), Tensor<double>(x.shape(), 2.0));
}

TEST(Backward, DetachedLossIsRejected) {
  Tape<double> tape;
  Var<double> x(Tensor<double>({1, 1, 1, 1}, 1.0));
  EXPECT_THROW(tape.backward(x), Error);
  Var<double> y(Tensor<double>({1, 1, 2, 2}, 1.0), true);
  auto s = sum(&tape, y);
  EXPECT_THROW(tape.backward(Var<double>(Tensor<double>({1, 1, 2, 2}))), ShapeError);
}

TEST(Backward, EveryOperatorPassesFiniteDifferences) {
  for (const auto& r : oracle::run_gradient_suite(20, 2024)) {
    EXPECT_EQ(r.shapes, 20) << r.op;
    EXPECT_LT(r.max_rel_error, 1e-4) << r.op;
  }
}

TEST(Determinism, IdenticalSeedsGiveBitIdenticalOutputs) {
  auto run = [] {
    Rng rng(77);
    Var<float> x(random_tensor<float>({2, 3, 9, 9}, rng));
    Var<float> w(random_tensor<float>({4, 3, 3, 3}, rng));
    auto y = conv2d<float>(nullptr, x, w, {}, {1, 2, 2});
    y = dropout<float>(nullptr, y, 0.2, Mode::Train, rng);
    return maxpool2d<float>(nullptr, y).output.value();
  };
  EXPECT_EQ(run(), run());
}
