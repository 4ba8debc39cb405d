// Channel plan, variant families and the dense skip topology of the FC-DRN dense block.
#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "fcdrn/blocks.hpp"

namespace fcdrn {

inline constexpr int kStageCount = 9;
inline constexpr int kLevelCount = 5;  // representation levels 0 (IDB resolution) .. 4 (bottleneck)

enum class Family { P, S, D, PD, SD };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::P: return "P";
    case Family::S: return "S";
    case Family::D: return "D";
    case Family::PD: return "P-D";
    case Family::SD: return "S-D";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  for (auto f : {Family::P, Family::S, Family::D, Family::PD, Family::SD}) {
    if (to_string(f) == s) return f;
  }
  throw Error("unknown variant family '" + s + "' (expected P, S, D, P-D or S-D)");
}

struct VariantSpec {
  Family family = Family::P;
  std::array<int, 4> dilation_rates{2, 4, 16, 32};  // D family, one base rate per downsampling slot
  std::array<int, 2> surgery_rates{4, 8};           // P-D / S-D, last two downsampling slots
  MultigridPattern multigrid = MultigridPattern::Uniform;
  int dilated_up_kernel = 1;  // D family upsampling-slot conv: 1 or 3
};

/// Widths at scale 1 and the divisor applied to build desk-scale models.
struct ChannelPlan {
  int input_channels = 3;
  int idb = 50;
  std::array<int, kStageCount> stages{30, 40, 40, 40, 50, 40, 40, 40, 30};
  std::array<int, kStageCount> mixing{80, 120, 160, 200, 200, 240, 280, 320, 350};
  int fub = 50;
  int classes = 11;
  double scale = 1.0;
  int blocks_per_stage = 7;

  static constexpr int kMinWidth = 4;

  [[nodiscard]] int width(int base) const {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw Error("channel plan: scale must be positive");
    return std::max(kMinWidth, static_cast<int>(std::lround(base * scale)));
  }
  [[nodiscard]] int idb_width() const { return width(idb); }
  [[nodiscard]] int stage_width(int stage) const { return width(stages.at(stage - 1)); }
  [[nodiscard]] int mixing_width(int row) const { return width(mixing.at(row - 1)); }
  [[nodiscard]] int fub_width() const { return width(fub); }

  void validate() const {
    (void)width(1);
    if (blocks_per_stage < 1) throw Error("channel plan: blocks per stage must be at least 1");
    if (classes < 2) throw Error("channel plan: at least two classes required");
    if (input_channels < 1) throw Error("channel plan: input channels must be positive");
  }
};

/// Source index: 0 is the IDB, k in 1..9 is ResNet stage R_k.
inline constexpr std::array<int, 1 + kStageCount> kSourceLevel{0, 0, 1, 2, 3, 4, 3, 2, 1, 0};
/// Level at which concatenation row k (input to R_{k+1}; row 9 feeds the FUB) is formed.
inline constexpr std::array<int, kStageCount> kRowLevel{1, 2, 3, 4, 3, 2, 1, 0, 0};

inline std::string source_name(int source) { return source == 0 ? "IDB" : "R" + std::to_string(source); }

enum class Direction { None, Down, Up };

struct SkipInput {
  int source = 0;
  Direction direction = Direction::None;
  int cascade = 0;  // number of chained transformations
};

struct ConcatRow {
  int row = 0;
  int level = 0;
  std::vector<SkipInput> inputs;  // IDB, R1, ..., R_row in order
};

/// Row k concatenates the IDB and every stage up to R_k, each moved to the row's level.
inline std::vector<ConcatRow> skip_topology() {
  std::vector<ConcatRow> rows;
  for (int row = 1; row <= kStageCount; ++row) {
    ConcatRow r{row, kRowLevel[row - 1], {}};
    for (int src = 0; src <= row; ++src) {
      const int delta = r.level - kSourceLevel[src];
      const Direction dir = delta > 0 ? Direction::Down : delta < 0 ? Direction::Up : Direction::None;
      r.inputs.push_back({src, dir, std::abs(delta)});
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Downsampling slot used by a step leaving `level` (0-based: slot 0 = first TF_d).
inline int down_slot(int from_level) { return from_level; }
/// Upsampling slot used by a step leaving `level` (0-based: slot 0 = first TF_u, from the bottleneck).
inline int up_slot(int from_level) { return kLevelCount - 1 - from_level; }

/// Everything needed to rebuild a graph: widths, block counts and what occupies each slot.
struct ArchitectureDescriptor {
  VariantSpec variant;
  ChannelPlan plan;
  std::array<int, kStageCount> blocks{};
  std::array<TransformKind, 4> down{};
  std::array<int, 4> down_rates{1, 1, 1, 1};
  std::array<TransformKind, 4> up{};

  /// Slot assignment per family. P-D and S-D normally come from surgery; `from_scratch` builds them
  /// directly with randomly initialised dilated convs.
  static ArchitectureDescriptor for_variant(const VariantSpec& variant, const ChannelPlan& plan,
                                            bool from_scratch = false) {
    plan.validate();
    ArchitectureDescriptor d{variant, plan, {}, {}, {1, 1, 1, 1}, {}};
    d.blocks.fill(plan.blocks_per_stage);
    switch (variant.family) {
      case Family::P:
        d.down.fill(TransformKind::MaxPool);
        d.up.fill(TransformKind::UpsampleConv);
        break;
      case Family::S:
        d.down.fill(TransformKind::StridedConv);
        d.up.fill(TransformKind::UpsampleConv);
        break;
      case Family::D:
        if (variant.dilated_up_kernel != 1 && variant.dilated_up_kernel != 3) {
          throw Error("D family upsampling kernel must be 1 or 3");
        }
        d.down.fill(TransformKind::Multigrid);
        d.down_rates = variant.dilation_rates;
        for (int r : d.down_rates) (void)multigrid_rates(r, variant.multigrid);
        d.up.fill(variant.dilated_up_kernel == 1 ? TransformKind::Conv1x1 : TransformKind::Conv3x3);
        break;
      case Family::PD:
      case Family::SD:
        if (!from_scratch) {
          throw Error("variant " + to_string(variant.family) + " is only reachable by surgery on a trained " +
                      (variant.family == Family::PD ? "P" : "S") + " model");
        }
        d.down.fill(variant.family == Family::PD ? TransformKind::MaxPool : TransformKind::StridedConv);
        d.down[2] = d.down[3] = TransformKind::DilatedConv;
        d.down_rates[2] = variant.surgery_rates[0];
        d.down_rates[3] = variant.surgery_rates[1];
        d.up.fill(TransformKind::UpsampleConv);
        d.up[0] = d.up[1] = TransformKind::Conv3x3;
        break;
    }
    return d;
  }

  /// Number of downsampling slots that actually halve resolution.
  [[nodiscard]] int halving_count() const {
    int n = 0;
    for (auto k : down) n += downsamples(k) ? 1 : 0;
    return n;
  }
};

}  // namespace fcdrn
