// The FC-DRN graph: IDB, nine ResNet stages joined by transformed dense skips, FUB and classifier.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fcdrn/architecture.hpp"
#include "fcdrn/receptive_field.hpp"

namespace fcdrn {

template <typename T>
struct SkipEdge {
  SkipInput input;
  std::vector<TransformBlock<T>> steps;  // down edges read the shared per-source chain instead
};

template <typename T>
struct ConcatStage {
  int row = 0;
  int level = 0;
  std::vector<SkipEdge<T>> edges;
  Conv2d<T> mixing;
};

/// Which prefix of each stage runs; everything by default.
struct ForwardOptions {
  std::array<std::size_t, kStageCount> active;
  ForwardOptions() { active.fill(SIZE_MAX); }
};

/// Spatial bookkeeping of one forward pass.
struct ForwardTrace {
  std::array<std::pair<int, int>, kLevelCount> level_size{};
  std::array<Shape, kStageCount> stage_output{};
  Shape idb_output;
  int min_h = 0;
  int min_w = 0;
};

struct RegistryEntry {
  int row = 0;
  int level = 0;
  std::vector<SkipInput> inputs;
  std::vector<int> input_widths;
  int concat_width = 0;
  int mixing_width = 0;
  int consumer_width = 0;  // output width of R_{row+1}, or the FUB for row 9
};

struct NamedReceptiveField {
  std::string name;
  ReceptiveField field;
};

template <typename T>
class ModelGraph {
 public:
  ArchitectureDescriptor arch;
  InitialDownsamplingBlock<T> idb;
  std::array<ResNetStage<T>, kStageCount> stages;
  std::array<std::vector<TransformBlock<T>>, kLevelCount> down_chains;  // sources IDB, R1..R4
  std::array<ConcatStage<T>, kStageCount> rows;
  FinalUpsamplingBlock<T> fub;
  Conv2d<T> classifier;

  static ModelGraph build(const VariantSpec& variant, const ChannelPlan& plan, std::uint64_t seed,
                          bool from_scratch = false) {
    return build(ArchitectureDescriptor::for_variant(variant, plan, from_scratch), seed);
  }

  /// Builds any descriptor, including surgered ones (their weights are expected to be loaded afterwards).
  static ModelGraph build(const ArchitectureDescriptor& arch, std::uint64_t seed) {
    arch.plan.validate();
    const auto& plan = arch.plan;
    ModelGraph m;
    m.arch = arch;
    Rng rng = derive_rng(seed, 0);

    m.idb = InitialDownsamplingBlock<T>::make(plan.input_channels, plan.idb_width(), rng);
    int in = plan.idb_width();
    for (int k = 1; k <= kStageCount; ++k) {
      if (arch.blocks[k - 1] < 1) throw Error("stage R" + std::to_string(k) + " needs at least one block");
      m.stages[k - 1] = ResNetStage<T>::make(in, plan.stage_width(k), arch.blocks[k - 1], rng);
      if (k < kStageCount) in = plan.mixing_width(k);
    }

    const auto topo = skip_topology();
    std::array<int, kLevelCount> chain_length{};
    for (const auto& row : topo) {
      for (const auto& s : row.inputs) {
        if (s.direction == Direction::Down) chain_length[s.source] = std::max(chain_length[s.source], s.cascade);
      }
    }
    for (int src = 0; src < kLevelCount; ++src) {
      for (int j = 0; j < chain_length[src]; ++j) {
        const int slot = down_slot(kSourceLevel[src] + j);
        m.down_chains[src].push_back(m.make_down(slot, m.source_width(src), rng));
      }
    }

    for (const auto& row : topo) {
      auto& r = m.rows[row.row - 1];
      r.row = row.row;
      r.level = row.level;
      int concat = 0;
      for (const auto& s : row.inputs) {
        SkipEdge<T> e{s, {}};
        const int c = m.source_width(s.source);
        if (s.direction == Direction::None) e.steps.push_back(TransformBlock<T>::conv1x1(c, rng));
        if (s.direction == Direction::Up) {
          for (int i = 0; i < s.cascade; ++i) e.steps.push_back(m.make_up(up_slot(kSourceLevel[s.source] - i), c, rng));
        }
        r.edges.push_back(std::move(e));
        concat += c;
      }
      r.mixing = Conv2d<T>::make(concat, plan.mixing_width(row.row), 1, {}, rng);
    }

    m.fub = FinalUpsamplingBlock<T>::make(plan.mixing_width(kStageCount), plan.fub_width(), rng);
    m.classifier = Conv2d<T>::make(plan.fub_width(), plan.classes, 1, {}, rng);
    return m;
  }

  [[nodiscard]] int source_width(int source) const {
    return source == 0 ? idb.out_channels() : stages[source - 1].out_channels();
  }
  [[nodiscard]] int num_classes() const { return classifier.out_channels(); }
  [[nodiscard]] Family family() const { return arch.variant.family; }

  Var<T> forward(const ForwardContext<T>& ctx, const Var<T>& image, const ForwardOptions& opt = {},
                 ForwardTrace* trace = nullptr) {
    const Shape is = image.shape();
    if (is.c != arch.plan.input_channels) {
      throw ShapeError("model: input has " + std::to_string(is.c) + " channels, expected " +
                       std::to_string(arch.plan.input_channels));
    }
    if (is.h < 32 || is.w < 32) throw ShapeError("model: input must be at least 32x32, got " + is.str());

    std::array<std::optional<std::pair<int, int>>, kLevelCount> level_size;
    auto note_level = [&](int level, const Var<T>& v) {
      const std::pair<int, int> hw{v.shape().h, v.shape().w};
      if (!level_size[level]) level_size[level] = hw;
      if (*level_size[level] != hw) throw ShapeError("model: inconsistent resolution at level " + std::to_string(level));
    };

    std::array<Var<T>, 1 + kStageCount> feats;
    feats[0] = idb.forward(ctx, image);
    note_level(0, feats[0]);
    feats[1] = stages[0].forward(ctx, feats[0], opt.active[0]);

    std::array<std::vector<Var<T>>, kLevelCount> down_cache;
    auto down = [&](int src, int steps) -> Var<T> {
      auto& cache = down_cache[src];
      if (cache.empty()) cache.push_back(feats[src]);
      while (static_cast<int>(cache.size()) <= steps) {
        const int j = static_cast<int>(cache.size()) - 1;
        cache.push_back(down_chains[src].at(j).forward(ctx, cache.back()));
        note_level(kSourceLevel[src] + j + 1, cache.back());
      }
      return cache[steps];
    };

    Var<T> last;
    for (int k = 1; k <= kStageCount; ++k) {
      auto& row = rows[k - 1];
      std::vector<Var<T>> parts;
      parts.reserve(row.edges.size());
      for (const auto& e : row.edges) {
        const int src = e.input.source;
        if (e.input.direction == Direction::Down) {
          parts.push_back(down(src, e.input.cascade));
          continue;
        }
        Var<T> h = feats[src];
        int level = kSourceLevel[src];
        for (const auto& step : e.steps) {
          if (e.input.direction == Direction::Up) {
            --level;
            if (!level_size[level]) throw ShapeError("model: no recorded size for level " + std::to_string(level));
            h = step.forward(ctx, h, level_size[level]);
          } else {
            h = step.forward(ctx, h);
          }
        }
        parts.push_back(h);
      }
      auto mixed = row.mixing(ctx.tape, concat_channels(ctx.tape, parts));
      if (k < kStageCount) {
        feats[k + 1] = stages[k].forward(ctx, mixed, opt.active[k]);
      } else {
        last = mixed;
      }
    }

    auto logits = classifier(ctx.tape, fub.forward(ctx, last, is.h, is.w));
    if (trace != nullptr) {
      trace->idb_output = feats[0].shape();
      trace->min_h = is.h;
      trace->min_w = is.w;
      for (int l = 0; l < kLevelCount; ++l) {
        trace->level_size[l] = level_size[l].value_or(std::pair{0, 0});
        if (level_size[l]) {
          trace->min_h = std::min(trace->min_h, level_size[l]->first);
          trace->min_w = std::min(trace->min_w, level_size[l]->second);
        }
      }
      for (int k = 1; k <= kStageCount; ++k) trace->stage_output[k - 1] = feats[k].shape();
    }
    return logits;
  }

  /// Eval-mode logits without recording.
  Tensor<T> infer(const Tensor<T>& image, const ForwardOptions& opt = {}) {
    return forward(ForwardContext<T>::eval(), Var<T>(image), opt).value();
  }

  template <typename F>
  void visit_params(F&& f) {
    idb.visit_params("idb", f);
    for (int k = 1; k <= kStageCount; ++k) stages[k - 1].visit_params("stage" + std::to_string(k), f);
    for (int src = 0; src < kLevelCount; ++src) {
      for (std::size_t j = 0; j < down_chains[src].size(); ++j) {
        down_chains[src][j].visit_params("down." + source_name(src) + "." + std::to_string(j + 1), f);
      }
    }
    for (auto& r : rows) {
      const std::string p = "row" + std::to_string(r.row);
      for (auto& e : r.edges) {
        for (std::size_t j = 0; j < e.steps.size(); ++j) {
          e.steps[j].visit_params(p + "." + source_name(e.input.source) + "." + std::to_string(j + 1), f);
        }
      }
      r.mixing.visit_params(p + ".mix", f);
    }
    fub.visit_params("fub", f);
    classifier.visit_params("classifier", f);
  }

  template <typename F>
  void visit_buffers(F&& f) {
    idb.visit_buffers("idb", f);
    for (int k = 1; k <= kStageCount; ++k) stages[k - 1].visit_buffers("stage" + std::to_string(k), f);
    fub.visit_buffers("fub", f);
  }

  [[nodiscard]] std::size_t count_parameters() const {
    std::size_t n = 0;
    const_cast<ModelGraph*>(this)->visit_params([&](const std::string&, Var<T>& v) { n += v.value().size(); });
    return n;
  }

  /// Deep copy: no parameter node is shared with the original.
  [[nodiscard]] ModelGraph clone() const {
    ModelGraph m = *this;
    m.visit_params([](const std::string&, Var<T>& v) { v = v.clone(); });
    return m;
  }

  [[nodiscard]] std::vector<RegistryEntry> skip_registry() const {
    std::vector<RegistryEntry> out;
    for (const auto& r : rows) {
      RegistryEntry e;
      e.row = r.row;
      e.level = r.level;
      for (const auto& edge : r.edges) {
        SkipInput s = edge.input;
        if (s.direction != Direction::Down) s.cascade = static_cast<int>(edge.steps.size());
        if (s.direction == Direction::None) s.cascade = 0;  // the 1x1 conv does not move resolution
        e.inputs.push_back(s);
        e.input_widths.push_back(source_width(s.source));
      }
      e.concat_width = r.mixing.in_channels();
      e.mixing_width = r.mixing.out_channels();
      e.consumer_width = r.row < kStageCount ? stages[r.row].out_channels() : fub.out_channels();
      out.push_back(std::move(e));
    }
    return out;
  }

  /// One line per block: name, kind, channels, stride/dilation, parameters.
  [[nodiscard]] std::string describe() const {
    std::ostringstream os;
    os << "FC-DRN-" << to_string(arch.variant.family) << "  params=" << count_parameters() << "\n";
    auto line = [&](const std::string& name, const std::string& kind, int in, int out, int stride, int dilation,
                    std::size_t params) {
      os << name << "  " << kind << "  " << in << "->" << out << "  s" << stride << " d" << dilation << "  "
         << params << "\n";
    };
    line("idb", "initial_downsampling", idb.conv0.in_channels(), idb.out_channels(), 2, 1, idb.parameter_count());
    auto stage_lines = [&](int k) {
      const auto& s = stages[k - 1];
      for (std::size_t b = 0; b < s.blocks.size(); ++b) {
        line("stage" + std::to_string(k) + ".block" + std::to_string(b + 1), "basic_block", s.blocks[b].in_channels(),
             s.blocks[b].out_channels(), 1, 1, s.blocks[b].parameter_count());
      }
    };
    stage_lines(1);
    auto tf_line = [&](const std::string& name, const TransformBlock<T>& tf, int c) {
      const int stride = downsamples(tf.kind) ? 2 : 1;
      const int dilation = tf.convs.empty() ? 1 : tf.convs.back().geom.dilation;
      line(name, to_string(tf.kind), c, c, stride, dilation, tf.parameter_count());
    };
    for (int src = 0; src < kLevelCount; ++src) {
      for (std::size_t j = 0; j < down_chains[src].size(); ++j) {
        tf_line("down." + source_name(src) + "." + std::to_string(j + 1), down_chains[src][j], source_width(src));
      }
    }
    for (int k = 1; k <= kStageCount; ++k) {
      const auto& row = rows[k - 1];
      for (const auto& e : row.edges) {
        for (std::size_t j = 0; j < e.steps.size(); ++j) {
          tf_line("row" + std::to_string(k) + "." + source_name(e.input.source) + "." + std::to_string(j + 1),
                  e.steps[j], source_width(e.input.source));
        }
      }
      line("row" + std::to_string(k) + ".mix", "mixing", row.mixing.in_channels(), row.mixing.out_channels(), 1, 1,
           row.mixing.parameter_count());
      if (k < kStageCount) stage_lines(k + 1);
    }
    line("fub", "final_upsampling", fub.bn_in.channels(), fub.out_channels(), 1, 1, fub.parameter_count());
    line("classifier", "conv1x1", classifier.in_channels(), classifier.out_channels(), 1, 1,
         classifier.parameter_count());
    return os.str();
  }

  /// Receptive field and downsample factor after the IDB, each stage and the classifier.
  [[nodiscard]] std::vector<NamedReceptiveField> receptive_fields(const ForwardOptions& opt = {}) const {
    std::vector<NamedReceptiveField> out;
    std::array<ReceptiveField, 1 + kStageCount> feats;
    feats[0] = compute_receptive_field(rf_layers(idb));
    out.push_back({"IDB", feats[0]});
    feats[1] = compute_receptive_field(rf_layers(stages[0], opt.active[0]), feats[0]);
    out.push_back({"R1", feats[1]});

    auto down_rf = [&](int src, int steps) {
      ReceptiveField s = feats[src];
      for (int j = 0; j < steps; ++j) s = compute_receptive_field(rf_layers(down_chains[src][j]), s);
      return s;
    };
    ReceptiveField last;
    for (int k = 1; k <= kStageCount; ++k) {
      ReceptiveField cat{0.0, 0.0};
      for (const auto& e : rows[k - 1].edges) {
        ReceptiveField s = e.input.direction == Direction::Down ? down_rf(e.input.source, e.input.cascade)
                                                                 : feats[e.input.source];
        for (const auto& step : e.steps) s = compute_receptive_field(rf_layers(step), s);
        cat.rf = std::max(cat.rf, s.rf);
        cat.jump = std::max(cat.jump, s.jump);
      }
      if (k < kStageCount) {
        feats[k + 1] = compute_receptive_field(rf_layers(stages[k], opt.active[k]), cat);
        out.push_back({"R" + std::to_string(k + 1), feats[k + 1]});
      } else {
        last = cat;
      }
    }
    const std::vector<RfLayer> head{{1, 0.5, 1}, rf_layer(fub.conv), rf_layer(classifier)};
    out.push_back({"output", compute_receptive_field(head, last)});
    return out;
  }

 private:
  TransformBlock<T> make_down(int slot, int c, Rng& rng) const {
    switch (arch.down[slot]) {
      case TransformKind::MaxPool: return TransformBlock<T>::maxpool();
      case TransformKind::StridedConv: return TransformBlock<T>::strided(c, rng);
      case TransformKind::Multigrid:
        return TransformBlock<T>::multigrid(c, c, arch.down_rates[slot], arch.variant.multigrid, rng);
      case TransformKind::DilatedConv: return TransformBlock<T>::dilated(c, arch.down_rates[slot], rng);
      default: throw Error("slot d" + std::to_string(slot + 1) + " cannot hold " + to_string(arch.down[slot]));
    }
  }

  TransformBlock<T> make_up(int slot, int c, Rng& rng) const {
    switch (arch.up[slot]) {
      case TransformKind::UpsampleConv: return TransformBlock<T>::upsample_conv(c, rng);
      case TransformKind::Conv1x1: return TransformBlock<T>::conv1x1(c, rng);
      case TransformKind::Conv3x3: return TransformBlock<T>::conv3x3(c, rng);
      default: throw Error("slot u" + std::to_string(slot + 1) + " cannot hold " + to_string(arch.up[slot]));
    }
  }
};

/// Swaps the last two downsampling slots for dilated convs and the first two upsampling slots for
/// plain 3x3 convs, in every cascade. Everything else is carried over untouched.
template <typename T>
ModelGraph<T> surgery_to_dilated(const ModelGraph<T>& source, std::array<int, 2> rates = {4, 8}) {
  const Family f = source.family();
  if (f == Family::PD || f == Family::SD) throw Error("surgery: model is already FC-DRN-" + to_string(f));
  if (f != Family::P && f != Family::S) throw Error("surgery: needs a P or S model, got " + to_string(f));
  for (int r : rates) {
    if (r < 1) throw Error("surgery: dilation rates must be positive");
  }

  ModelGraph<T> m = source.clone();
  for (int src = 0; src < kLevelCount; ++src) {
    auto& chain = m.down_chains[src];
    for (std::size_t j = 0; j < chain.size(); ++j) {
      const int slot = down_slot(kSourceLevel[src] + static_cast<int>(j));
      if (slot < 2) continue;
      const int rate = rates[slot - 2];
      const int c = m.source_width(src);
      if (f == Family::P) {
        chain[j] = {TransformKind::DilatedConv, {Conv2d<T>::identity(c, 3, {1, rate, rate})}};
      } else {
        Conv2d<T> conv = chain[j].convs.front();
        conv.geom = {1, rate, rate};
        chain[j] = {TransformKind::DilatedConv, {conv}};
      }
    }
  }
  for (auto& row : m.rows) {
    for (auto& e : row.edges) {
      if (e.input.direction != Direction::Up) continue;
      for (std::size_t i = 0; i < e.steps.size(); ++i) {
        const int slot = up_slot(kSourceLevel[e.input.source] - static_cast<int>(i));
        if (slot < 2) e.steps[i].kind = TransformKind::Conv3x3;
      }
    }
  }
  m.arch.variant.family = f == Family::P ? Family::PD : Family::SD;
  m.arch.variant.surgery_rates = rates;
  m.arch.down[2] = m.arch.down[3] = TransformKind::DilatedConv;
  m.arch.down_rates[2] = rates[0];
  m.arch.down_rates[3] = rates[1];
  m.arch.up[0] = m.arch.up[1] = TransformKind::Conv3x3;
  return m;
}

}  // namespace fcdrn
