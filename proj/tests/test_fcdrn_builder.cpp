#include <gtest/gtest.h>

#include <map>

#include "fcdrn/model.hpp"
#include "oracles.hpp"
#include "reference_table.hpp"

using namespace fcdrn;

namespace {

ChannelPlan small_plan(double scale = 0.25, int blocks = 1) {
  ChannelPlan p;
  p.scale = scale;
  p.blocks_per_stage = blocks;
  return p;
}

ModelGraph<float> build(Family f, ChannelPlan plan = small_plan(), std::uint64_t seed = 1) {
  VariantSpec v;
  v.family = f;
  return ModelGraph<float>::build(v, plan, seed);
}

Tensor<float> image(int h, int w, std::uint64_t seed = 3) {
  Rng rng(seed);
  return random_tensor<float>({1, 3, h, w}, rng);
}

std::map<std::string, Tensor<float>> snapshot(ModelGraph<float>& m) {
  std::map<std::string, Tensor<float>> out;
  m.visit_params([&](const std::string& n, Var<float>& v) { out[n] = v.value(); });
  return out;
}

// Independent of visit_params: walks the structure through each block's own counter.
std::size_t structural_count(const ModelGraph<float>& m) {
  std::size_t n = m.idb.parameter_count() + m.fub.parameter_count() + m.classifier.parameter_count();
  for (const auto& s : m.stages) n += s.parameter_count();
  for (const auto& chain : m.down_chains) {
    for (const auto& tf : chain) n += tf.parameter_count();
  }
  for (const auto& r : m.rows) {
    n += r.mixing.parameter_count();
    for (const auto& e : r.edges) {
      for (const auto& tf : e.steps) n += tf.parameter_count();
    }
  }
  return n;
}

}  // namespace

TEST(Builder, FullWidthStructure) {
  ChannelPlan plan;
  auto m = build(Family::P, plan);
  ASSERT_EQ(m.stages.size(), 9u);
  for (const auto& s : m.stages) EXPECT_EQ(s.blocks.size(), 7u);
  EXPECT_EQ(m.stages[4].in_channels(), 200);
  EXPECT_EQ(m.rows[3].mixing.out_channels(), 200);
  EXPECT_EQ(m.num_classes(), 11);
}

TEST(Builder, RegistryMatchesTableAtEveryScale) {
  for (double scale : {1.0, 0.5, 0.25, 0.1}) {
    for (Family f : {Family::P, Family::S, Family::D}) {
      auto m = build(f, small_plan(scale, 1));
      const auto diffs = oracle::table_diff(m);
      EXPECT_TRUE(diffs.empty()) << to_string(f) << " scale " << scale << ": " << (diffs.empty() ? "" : diffs[0]);
    }
  }
}

TEST(Builder, PreSoftmaxConcatSeesEverySource) {
  auto m = build(Family::P);
  const auto reg = m.skip_registry();
  std::vector<int> sources;
  for (const auto& s : reg.back().inputs) sources.push_back(s.source);
  EXPECT_EQ(sources, (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}));
}

TEST(Builder, ScaleFloorsWidthsAtFour) {
  auto m = build(Family::P, small_plan(0.05));
  EXPECT_EQ(m.idb.out_channels(), 4);
  EXPECT_EQ(m.stages[0].out_channels(), 4);
  EXPECT_EQ(m.rows[8].mixing.out_channels(), 18);
}

TEST(Builder, Errors) {
  EXPECT_THROW(build(Family::PD), Error);
  EXPECT_THROW(build(Family::SD), Error);
  EXPECT_THROW(build(Family::P, small_plan(0.0)), Error);
  EXPECT_THROW(build(Family::P, small_plan(-1.0)), Error);
  EXPECT_THROW(family_from_string("Q"), Error);
  EXPECT_EQ(family_from_string("S-D"), Family::SD);
  VariantSpec v;
  v.family = Family::D;
  v.dilated_up_kernel = 5;
  EXPECT_THROW(ModelGraph<float>::build(v, small_plan(), 1), Error);
}

TEST(Builder, ParameterCountMatchesStructuralWalk) {
  for (Family f : {Family::P, Family::S, Family::D}) {
    auto m = build(f, ChannelPlan{});
    EXPECT_EQ(m.count_parameters(), structural_count(m)) << to_string(f);
    auto pd = surgery_to_dilated(build(Family::P, small_plan(0.5, 2)));
    EXPECT_EQ(pd.count_parameters(), structural_count(pd));
  }
  Rng rng(1);
  EXPECT_EQ(Conv2d<float>::make(80, 80, 1, {}, rng).parameter_count(), 6480u);
}

TEST(Builder, FullWidthParameterParity) {
  std::map<Family, double> counts;
  for (Family f : {Family::P, Family::S, Family::D}) counts[f] = static_cast<double>(build(f, ChannelPlan{}).count_parameters());
  const double pd = static_cast<double>(surgery_to_dilated(build(Family::P, ChannelPlan{})).count_parameters());
  EXPECT_NEAR(pd, 3.9e6, 0.08 * 3.9e6);
  for (auto [a, ca] : counts) {
    for (auto [b, cb] : counts) EXPECT_LE(std::abs(ca - cb) / std::min(ca, cb), 0.10);
  }
}

TEST(Builder, LogitsMatchInputSize) {
  for (Family f : {Family::P, Family::S, Family::D}) {
    auto m = build(f);
    for (auto [h, w] : {std::pair{64, 64}, std::pair{72, 96}, std::pair{45, 61}}) {
      EXPECT_EQ(m.infer(image(h, w)).shape(), (Shape{1, 11, h, w})) << to_string(f) << " " << h << "x" << w;
    }
  }
  auto m = build(Family::P);
  EXPECT_THROW(m.infer(image(31, 64)), ShapeError);
  EXPECT_THROW(m.infer(Tensor<float>({1, 1, 64, 64})), ShapeError);
}

TEST(Builder, DilatedFamilyKeepsPostIdbResolution) {
  auto m = build(Family::D);
  ForwardTrace trace;
  m.forward(ForwardContext<float>::eval(), Var<float>(image(64, 80)), {}, &trace);
  for (const auto& s : trace.stage_output) {
    EXPECT_EQ(s.h, 32);
    EXPECT_EQ(s.w, 40);
  }
  EXPECT_EQ(trace.min_h, 32);
}

TEST(Builder, PoolingFamilyLevels) {
  auto m = build(Family::P);
  ForwardTrace trace;
  m.forward(ForwardContext<float>::eval(), Var<float>(image(96, 128)), {}, &trace);
  EXPECT_EQ(trace.level_size[4], (std::pair{3, 4}));
  EXPECT_EQ(trace.stage_output[4].h, 3);
  EXPECT_EQ(trace.stage_output[8].h, 48);
}

TEST(Builder, EvalForwardIsDeterministic) {
  auto a = build(Family::S, small_plan(), 42);
  auto b = build(Family::S, small_plan(), 42);
  const auto x = image(48, 64);
  const auto y1 = a.infer(x);
  EXPECT_EQ(y1, a.infer(x));
  EXPECT_EQ(y1, b.infer(x));
  auto c = build(Family::S, small_plan(), 43);
  EXPECT_NE(y1, c.infer(x));
}

TEST(Builder, CloneSharesNothing) {
  auto m = build(Family::P);
  auto c = m.clone();
  const auto x = image(32, 32);
  EXPECT_EQ(m.infer(x), c.infer(x));
  c.classifier.bias.mutable_value().fill(1.0f);
  EXPECT_NE(m.infer(x), c.infer(x));
}

TEST(Builder, DescribeListsEveryBlock) {
  auto m = build(Family::P, small_plan(0.25, 2));
  const auto text = m.describe();
  EXPECT_NE(text.find("stage9.block2  basic_block"), std::string::npos);
  EXPECT_NE(text.find("row5.R5.1  upsample_conv"), std::string::npos);
  EXPECT_NE(text.find("down.IDB.4  maxpool"), std::string::npos);
  EXPECT_NE(text.find("classifier  conv1x1  13->11"), std::string::npos);
}

TEST(Surgery, PoolingSourceGetsIdentityDilations) {
  auto p = build(Family::P);
  auto pd = surgery_to_dilated(p);
  EXPECT_EQ(pd.family(), Family::PD);
  Rng rng(5);
  for (int src = 0; src < kLevelCount; ++src) {
    const auto& chain = pd.down_chains[src];
    for (std::size_t j = 0; j < chain.size(); ++j) {
      const int slot = kSourceLevel[src] + static_cast<int>(j);
      if (slot < 2) {
        EXPECT_EQ(chain[j].kind, TransformKind::MaxPool);
        continue;
      }
      ASSERT_EQ(chain[j].kind, TransformKind::DilatedConv);
      EXPECT_EQ(chain[j].convs[0].geom.dilation, slot == 2 ? 4 : 8);
      Var<float> x(random_tensor<float>({2, pd.source_width(src), 9, 13}, rng));
      EXPECT_LT(max_abs_diff(chain[j].forward(ForwardContext<float>::eval(), x).value(), x.value()), 1e-6);
    }
  }
}

TEST(Surgery, UntouchedParametersAreBitIdentical) {
  auto p = build(Family::P);
  auto before = snapshot(p);
  auto pd = surgery_to_dilated(p);
  auto after = snapshot(pd);
  std::size_t added = 0;
  for (const auto& [name, t] : after) {
    auto it = before.find(name);
    if (it == before.end()) {
      EXPECT_TRUE(name.starts_with("down.")) << name;
      added += t.size();
      continue;
    }
    EXPECT_EQ(it->second, t) << name;
  }
  EXPECT_EQ(before.size() + 9u * 2, after.size());  // two per chain for IDB, R1, R2, R3 and one for R4
  EXPECT_EQ(pd.count_parameters(), p.count_parameters() + added);
  EXPECT_EQ(snapshot(p), before);
}

TEST(Surgery, StridedSourceCopiesWeights) {
  auto s = build(Family::S);
  auto sd = surgery_to_dilated(s);
  EXPECT_EQ(sd.family(), Family::SD);
  EXPECT_EQ(sd.count_parameters(), s.count_parameters());
  const auto& before = s.down_chains[0][3].convs[0];
  const auto& after = sd.down_chains[0][3].convs[0];
  EXPECT_EQ(before.weight.value(), after.weight.value());
  EXPECT_EQ(before.geom.stride, 2);
  EXPECT_EQ(after.geom.stride, 1);
  EXPECT_EQ(after.geom.dilation, 8);
  EXPECT_EQ(after.geom.padding, 8);
  EXPECT_NE(before.weight.node(), after.weight.node());
}

TEST(Surgery, ResolutionAndShapes) {
  for (Family f : {Family::P, Family::S}) {
    auto m = build(f);
    auto d = surgery_to_dilated(m);
    ForwardTrace t0, t1;
    m.forward(ForwardContext<float>::eval(), Var<float>(image(96, 128)), {}, &t0);
    auto y = d.forward(ForwardContext<float>::eval(), Var<float>(image(96, 128)), {}, &t1);
    EXPECT_EQ(y.shape(), (Shape{1, 11, 96, 128}));
    EXPECT_EQ(t0.min_h, 96 / 32);
    EXPECT_EQ(t1.min_h, 96 / 8);
    EXPECT_EQ(t1.min_w, 128 / 8);
  }
}

TEST(Surgery, UpSlotsLoseTheirUpsample) {
  auto pd = surgery_to_dilated(build(Family::P));
  for (const auto& row : pd.rows) {
    for (const auto& e : row.edges) {
      if (e.input.direction != Direction::Up) continue;
      for (std::size_t i = 0; i < e.steps.size(); ++i) {
        const int slot = up_slot(kSourceLevel[e.input.source] - static_cast<int>(i));
        EXPECT_EQ(e.steps[i].kind, slot < 2 ? TransformKind::Conv3x3 : TransformKind::UpsampleConv);
      }
    }
  }
  EXPECT_TRUE(oracle::table_diff(pd).empty());
}

TEST(Surgery, Errors) {
  EXPECT_THROW(surgery_to_dilated(build(Family::D)), Error);
  auto pd = surgery_to_dilated(build(Family::P));
  EXPECT_THROW(surgery_to_dilated(pd), Error);
}

TEST(Surgery, DescriptorRebuildHasSameStructure) {
  auto pd = surgery_to_dilated(build(Family::S));
  auto rebuilt = ModelGraph<float>::build(pd.arch, 9);
  EXPECT_EQ(rebuilt.count_parameters(), pd.count_parameters());
  std::vector<std::string> a, b;
  pd.visit_params([&](const std::string& n, Var<float>&) { a.push_back(n); });
  rebuilt.visit_params([&](const std::string& n, Var<float>&) { b.push_back(n); });
  EXPECT_EQ(a, b);
}

TEST(ModelReceptiveField, PrefixMatchesGradientSupport) {
  VariantSpec v;
  auto plan = small_plan(0.1, 1);
  plan.input_channels = 1;
  auto m = ModelGraph<double>::build(v, plan, 4);
  m.visit_params([&](const std::string& name, Var<double>& p) {
    Rng rng(std::hash<std::string>{}(name));
    for (auto& x : p.mutable_value().values()) {
      x = name.ends_with(".bias") || name.ends_with(".beta") ? 0.0 : uniform(rng, 0.1, 1.0);
    }
  });
  const auto rfs = m.receptive_fields();
  ASSERT_EQ(rfs[2].name, "R2");
  auto prefix = [&m](Tape<double>* t, const Var<double>& x) {
    ForwardContext<double> ctx;
    ctx.tape = t;
    auto f0 = m.idb.forward(ctx, x);
    auto f1 = m.stages[0].forward(ctx, f0);
    auto cat = concat_channels(t, std::vector<Var<double>>{m.down_chains[0][0].forward(ctx, f0),
                                                            m.down_chains[1][0].forward(ctx, f1)});
    return m.stages[1].forward(ctx, m.rows[0].mixing(t, cat));
  };
  EXPECT_DOUBLE_EQ(rfs[2].field.jump, 4.0);
  EXPECT_EQ(oracle::receptive_field_by_gradient(prefix, {1, 1, 4, 96}, 8, 24),
            static_cast<int>(rfs[2].field.rf));
  EXPECT_GT(rfs.back().field.rf, rfs[1].field.rf);
}

TEST(ModelReceptiveField, SurgeryGrowsDeepFields) {
  auto p = build(Family::P);
  auto pd = surgery_to_dilated(p);
  const auto a = p.receptive_fields();
  const auto b = pd.receptive_fields();
  EXPECT_DOUBLE_EQ(a[5].field.jump, 32.0);  // R5 at the bottleneck
  EXPECT_DOUBLE_EQ(b[5].field.jump, 8.0);
}
