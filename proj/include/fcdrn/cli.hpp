// Command-line front end. Kept in a header so the test suite can drive it in-process.
#pragma once

#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fcdrn/analysis.hpp"
#include "fcdrn/camvid.hpp"
#include "fcdrn/checkpoint.hpp"
#include "fcdrn/config.hpp"

#ifndef FCDRN_VERSION
#define FCDRN_VERSION "0.1.0"
#endif

namespace fcdrn::cli {

enum ExitCode { kOk = 0, kUsage = 1, kDataFailure = 2, kNumericalFailure = 3 };

class UsageError : public Error {
 public:
  using Error::Error;
};

/// `synth:key=value,...` or `camvid:<root>`.
struct DataSpec {
  bool synthetic = true;
  SyntheticSpec train;
  int val_count = 50;
  std::string root;
};

inline DataSpec parse_data_spec(const std::string& s) {
  DataSpec d;
  if (s.rfind("camvid:", 0) == 0) {
    d.synthetic = false;
    d.root = s.substr(7);
    if (d.root.empty()) throw UsageError("--data camvid: needs a directory");
    return d;
  }
  if (s.rfind("synth", 0) != 0) throw UsageError("--data must be synth:<spec> or camvid:<path>, got '" + s + "'");
  std::string body = s.size() > 5 && s[5] == ':' ? s.substr(6) : s.substr(5);
  std::istringstream is(body);
  std::string item;
  auto num = [](const std::string& k, const std::string& v) {
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw UsageError("synthetic spec: bad value '" + v + "' for " + k);
    }
  };
  while (std::getline(is, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("synthetic spec: expected key=value, got '" + item + "'");
    const auto k = item.substr(0, eq), v = item.substr(eq + 1);
    auto& t = d.train;
    if (k == "count") t.count = static_cast<int>(num(k, v));
    else if (k == "val") d.val_count = static_cast<int>(num(k, v));
    else if (k == "size") t.height = t.width = static_cast<int>(num(k, v));
    else if (k == "height") t.height = static_cast<int>(num(k, v));
    else if (k == "width") t.width = static_cast<int>(num(k, v));
    else if (k == "classes") t.classes = static_cast<int>(num(k, v));
    else if (k == "noise") t.noise = num(k, v);
    else if (k == "seed") t.seed = static_cast<std::uint64_t>(num(k, v));
    else if (k == "min") t.min_shapes = static_cast<int>(num(k, v));
    else if (k == "max") t.max_shapes = static_cast<int>(num(k, v));
    else if (k == "shapes") {
      t.shapes.clear();
      std::istringstream ss(v);
      std::string sh;
      while (std::getline(ss, sh, '+')) {
        if (sh == "rect") t.shapes.push_back(ShapeKind::Rectangle);
        else if (sh == "disc") t.shapes.push_back(ShapeKind::Disc);
        else if (sh == "bar") t.shapes.push_back(ShapeKind::Bar);
        else throw UsageError("synthetic spec: unknown shape '" + sh + "' (rect, disc, bar)");
      }
    } else {
      throw UsageError("synthetic spec: unknown key '" + k + "'");
    }
  }
  try {
    d.train.validate();
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  if (d.val_count < 1) throw UsageError("synthetic spec: val must be at least 1");
  return d;
}

/// Synthetic splits occupy disjoint index ranges: train [0, count), val after it, test after val.
inline Dataset load_split(const DataSpec& d, const std::string& split) {
  if (!d.synthetic) return load_camvid_format(d.root, split);
  SyntheticSpec s = d.train;
  if (split == "val") {
    s.start_index = d.train.count;
    s.count = d.val_count;
  } else if (split == "test") {
    s.start_index = d.train.count + d.val_count;
    s.count = d.val_count;
  } else if (split != "train") {
    throw UsageError("unknown split '" + split + "' (train, val, test)");
  }
  auto out = generate_synthetic(s);
  out.name = "synthetic/" + split;
  return out;
}

inline int data_classes(const DataSpec& d) { return d.synthetic ? d.train.classes : kCamVidClasses; }

/// Everything a command needs after flag parsing.
struct Invocation {
  std::string command;
  std::string argv_line;
  RunConfig config;
  std::string out;
  std::string from;
  std::string resume;
  std::string split = "val";
  std::string rates = "4,8";
  std::string stage_thresholds;
  double threshold = 0.0;
  bool quiet = false;
  bool data_given = false;
  std::ostream* log = &std::cerr;
  std::ostream* stdout_ = &std::cout;
};

inline std::string reproducibility_stanza(const Invocation& inv) {
  std::ostringstream os;
  os << "command = " << inv.argv_line << "\n"
     << "seed = " << inv.config.train.seed << "\n"
     << "config_hash = " << config_hash(inv.config) << "\n"
     << "version = fcdrn " << FCDRN_VERSION << "\n";
  return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p);
  os << text;
  if (!os) throw DataError("cannot write " + p.string());
}

inline void emit_stanza(const Invocation& inv) {
  if (inv.out.empty()) {
    std::istringstream is(reproducibility_stanza(inv));
    std::string line;
    while (std::getline(is, line)) *inv.stdout_ << "# " << line << "\n";
    return;
  }
  write_text(std::filesystem::path(inv.out) / "run.txt", reproducibility_stanza(inv) + "\n" + config_to_text(inv.config));
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw UsageError(what);
}

inline std::array<int, 2> parse_rates(const std::string& s) {
  std::array<int, 2> r{};
  char comma = 0;
  std::istringstream is(s);
  if (!(is >> r[0] >> comma >> r[1]) || comma != ',' || !(is >> std::ws).eof() || r[0] < 1 || r[1] < 1) {
    throw UsageError("--rates expects two positive integers like 4,8, got '" + s + "'");
  }
  return r;
}

inline std::array<std::optional<double>, kStageCount> parse_stage_thresholds(const std::string& s) {
  std::array<std::optional<double>, kStageCount> out{};
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    try {
      if (eq == std::string::npos) throw std::invalid_argument(item);
      const int stage = std::stoi(item.substr(0, eq));
      const double eps = std::stod(item.substr(eq + 1));
      if (stage < 1 || stage > kStageCount || !(eps >= 0.0)) throw std::invalid_argument(item);
      out[stage - 1] = eps;
    } catch (const std::exception&) {
      throw UsageError("--stage-threshold expects entries like 3=0.05 (stage 1-9), got '" + item + "'");
    }
  }
  return out;
}

/// The P-D / S-D families normally come from surgery; building one directly needs --from-scratch.
template <typename T>
ModelGraph<T> build_from_config(const RunConfig& c, bool allow_surgery_path) {
  const Family f = c.variant.family;
  if ((f == Family::PD || f == Family::SD) && !c.from_scratch) {
    if (!allow_surgery_path) {
      throw UsageError("FC-DRN-" + to_string(f) + " is obtained with `surgery`; pass --from-scratch to train it directly");
    }
    VariantSpec base = c.variant;
    base.family = f == Family::PD ? Family::P : Family::S;
    return surgery_to_dilated(ModelGraph<T>::build(base, c.plan, c.train.seed), c.variant.surgery_rates);
  }
  return ModelGraph<T>::build(ArchitectureDescriptor::for_variant(c.variant, c.plan, c.from_scratch), c.train.seed);
}

template <typename T>
ModelGraph<T> load_model(const std::string& dir) {
  return load_checkpoint<T>(dir).model;
}

inline std::vector<std::string> class_names(int k) {
  std::vector<std::string> names;
  for (int c = 0; c < k; ++c) names.push_back(k == kCamVidClasses ? camvid_class_names()[c] : "class" + std::to_string(c));
  return names;
}

template <typename T>
int cmd_train(Invocation& inv) {
  namespace fs = std::filesystem;
  require(!inv.out.empty(), "train needs --out");
  require(inv.data_given, "train needs --data");
  const auto data = parse_data_spec(inv.config.data);
  auto& cfg = inv.config;

  TrainOptions<T> opts;
  std::map<std::string, Tensor<T>> opt_state;
  ModelGraph<T> model;
  if (!inv.resume.empty()) {
    auto ck = load_checkpoint<T>(inv.resume);
    model = std::move(ck.model);
    opt_state = std::move(ck.optimizer_state);
    opts.start_epoch = ck.meta.epoch;
    opts.optimizer_state = &opt_state;
  } else {
    model = build_from_config<T>(cfg, false);
  }
  require(model.num_classes() >= data_classes(data),
          "model predicts " + std::to_string(model.num_classes()) + " classes but the data has " +
              std::to_string(data_classes(data)));
  const auto train_set = load_split(data, "train");
  const auto val_set = load_split(data, "val");
  emit_stanza(inv);
  write_text(fs::path(inv.out) / "config.txt", config_to_text(cfg));

  const fs::path out(inv.out);
  double best = -1.0;
  auto meta_for = [&](const EpochRecord& r) {
    CheckpointMeta m;
    m.epoch = r.epoch;
    m.val_miou = r.val_miou;
    m.seed = cfg.train.seed;
    m.rng_state = "derived seed=" + std::to_string(cfg.train.seed) + " next_epoch=" + std::to_string(r.epoch + 1);
    m.extra = {{"config", config_to_text(cfg)}, {"config_hash", config_hash(cfg)}};
    return m;
  };
  opts.on_epoch = [&](const EpochRecord& r) {
    if (!inv.quiet) {
      *inv.log << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.train_loss << " val_miou " << r.val_miou
               << " (" << r.seconds << " s)\n";
    }
    if (r.val_miou > best) {
      best = r.val_miou;
      save_checkpoint(model, meta_for(r), out / "best", static_cast<const std::map<std::string, Tensor<T>>*>(nullptr));
    }
  };
  auto result = train(model, train_set, val_set, cfg.train, opts);

  {
    std::ofstream os(out / "history.csv");
    write_history_csv(os, result.history);
  }
  if (!result.history.empty()) {
    save_checkpoint(model, meta_for(result.history.back()), out / "last", &result.optimizer_state);
  } else if (!fs::exists(out / "best")) {
    EpochRecord none;
    none.epoch = opts.start_epoch;
    save_checkpoint(model, meta_for(none), out / "best", static_cast<const std::map<std::string, Tensor<T>>*>(nullptr));
  }
  *inv.stdout_ << "status " << to_string(result.status) << " best_epoch " << result.best_epoch << " best_val_miou "
               << result.best_val_miou << "\n";
  if (result.status == TrainStatus::Diverged) {
    *inv.log << "training diverged: " << result.message << "\n";
    return kNumericalFailure;
  }
  return kOk;
}

template <typename T>
int cmd_eval(Invocation& inv) {
  require(!inv.from.empty(), "eval needs --from <checkpoint>");
  require(inv.data_given, "eval needs --data");
  const auto data = parse_data_spec(inv.config.data);
  auto model = load_model<T>(inv.from);
  const auto set = load_split(data, inv.split);
  const auto cm = evaluate(model, set);
  emit_stanza(inv);
  std::ostringstream csv;
  write_metrics_csv(csv, cm, class_names(model.num_classes()));
  if (!inv.out.empty()) write_text(std::filesystem::path(inv.out) / "metrics.csv", csv.str());
  *inv.stdout_ << csv.str();
  return kOk;
}

template <typename T>
int cmd_surgery(Invocation& inv) {
  require(!inv.from.empty(), "surgery needs --from <checkpoint>");
  require(!inv.out.empty(), "surgery needs --out");
  const auto rates = parse_rates(inv.rates);
  auto ck = load_checkpoint<T>(inv.from);
  auto dilated = surgery_to_dilated(ck.model, rates);
  CheckpointMeta meta = ck.meta;
  meta.epoch = 0;
  meta.extra["surgery_from"] = inv.from;
  save_checkpoint(dilated, meta, inv.out, static_cast<const std::map<std::string, Tensor<T>>*>(nullptr));
  emit_stanza(inv);
  *inv.stdout_ << "FC-DRN-" << to_string(dilated.family()) << " params " << dilated.count_parameters() << "\n";
  return kOk;
}

template <typename T>
int cmd_ablate(Invocation& inv) {
  require(!inv.from.empty(), "ablate needs --from <checkpoint>");
  require(!inv.out.empty(), "ablate needs --out");
  require(inv.data_given, "ablate needs --data");
  const auto data = parse_data_spec(inv.config.data);
  auto model = load_model<T>(inv.from);
  const auto r = ablation_sweep(model, load_split(data, inv.split));
  std::ostringstream csv;
  write_ablation_csv(csv, r);
  const std::filesystem::path out(inv.out);
  write_text(out / "ablation.csv", csv.str());
  write_text(out / "ablation.svg", ablation_svg(r));
  emit_stanza(inv);
  *inv.stdout_ << csv.str();
  return kOk;
}

template <typename T>
int cmd_norms(Invocation& inv) {
  require(!inv.from.empty(), "norms needs --from <checkpoint>");
  require(!inv.out.empty(), "norms needs --out");
  auto model = load_model<T>(inv.from);
  const auto r = weight_norms(model);
  std::ostringstream csv;
  write_weight_norms_csv(csv, r);
  const std::filesystem::path out(inv.out);
  write_text(out / "norms.csv", csv.str());
  write_text(out / "norms.svg", weight_norms_svg(r, "Residual weight norms, FC-DRN-" + to_string(model.family())));
  emit_stanza(inv);
  *inv.stdout_ << r.entries.size() << " residual convs written to " << (out / "norms.csv").string() << "\n";
  return kOk;
}

template <typename T>
int cmd_compress(Invocation& inv) {
  require(!inv.from.empty(), "compress needs --from <checkpoint>");
  require(!inv.out.empty(), "compress needs --out");
  require(inv.threshold >= 0.0, "--threshold must be non-negative");
  const auto per_stage = parse_stage_thresholds(inv.stage_thresholds);
  std::optional<Dataset> val;
  if (inv.data_given) val = load_split(parse_data_spec(inv.config.data), inv.split);
  auto ck = load_checkpoint<T>(inv.from);
  auto [r, compressed] = compress(ck.model, inv.threshold, val ? &*val : nullptr, per_stage);
  const std::filesystem::path out(inv.out);
  CheckpointMeta meta = ck.meta;
  meta.extra["compressed_from"] = inv.from;
  meta.extra["threshold"] = inv.threshold;
  if (r.miou_after) meta.val_miou = *r.miou_after;
  save_checkpoint(compressed, meta, out / "model", static_cast<const std::map<std::string, Tensor<T>>*>(nullptr));
  std::ostringstream removed, summary;
  write_compression_csv(removed, r);
  write_text(out / "removed.csv", removed.str());
  summary << "architecture,removed_blocks,params_before,params_after,compression_rate,val_miou_before,val_miou_after,"
             "miou_delta\n"
          << "FC-DRN-" << to_string(compressed.family()) << ',' << r.removed.size() << ',' << r.params_before << ','
          << r.params_after << ',' << std::setprecision(6) << std::fixed << r.rate << ',';
  if (r.miou_before) summary << *r.miou_before << ',' << *r.miou_after << ',' << *r.delta();
  else summary << ",,";
  summary << "\n";
  write_text(out / "compression.csv", summary.str());
  emit_stanza(inv);
  *inv.stdout_ << summary.str();
  return kOk;
}

template <typename T>
int cmd_retrain_reduced(Invocation& inv) {
  require(!inv.from.empty(), "retrain-reduced needs --from <trained checkpoint>");
  require(!inv.out.empty(), "retrain-reduced needs --out");
  require(inv.data_given, "retrain-reduced needs --data");
  require(inv.threshold >= 0.0, "--threshold must be non-negative");
  const auto data = parse_data_spec(inv.config.data);
  auto trained = load_model<T>(inv.from);
  const auto train_set = load_split(data, "train");
  const auto val_set = load_split(data, "val");
  emit_stanza(inv);
  TrainOptions<T> opts;
  if (!inv.quiet) {
    opts.on_epoch = [&](const EpochRecord& r) {
      *inv.log << "epoch " << r.epoch << " loss " << r.train_loss << " val_miou " << r.val_miou << "\n";
    };
  }
  const auto rep = retrain_comparison(trained, inv.threshold, train_set, val_set, inv.config.train,
                                      inv.config.train.seed, opts);
  std::ostringstream csv, md;
  write_retrain_csv(csv, rep);
  write_retrain_table(md, rep);
  const std::filesystem::path out(inv.out);
  write_text(out / "retrain.csv", csv.str());
  write_text(out / "retrain.md", md.str());
  *inv.stdout_ << md.str();
  return kOk;
}

template <typename T>
ModelGraph<T> model_for_inspection(const Invocation& inv) {
  if (!inv.from.empty()) return load_model<T>(inv.from);
  return build_from_config<T>(inv.config, true);
}

template <typename T>
int cmd_count_params(Invocation& inv) {
  auto model = model_for_inspection<T>(inv);
  std::ostringstream os;
  os << model.describe();
  os << "total " << model.count_parameters() << "\n";
  if (!inv.out.empty()) write_text(std::filesystem::path(inv.out) / "params.txt", os.str());
  emit_stanza(inv);
  *inv.stdout_ << os.str();
  return kOk;
}

template <typename T>
int cmd_rf(Invocation& inv) {
  auto model = model_for_inspection<T>(inv);
  std::ostringstream os;
  os << "feature,receptive_field,jump\n";
  for (const auto& f : model.receptive_fields()) os << f.name << ',' << f.field.rf << ',' << f.field.jump << "\n";
  if (!inv.out.empty()) write_text(std::filesystem::path(inv.out) / "receptive_field.csv", os.str());
  emit_stanza(inv);
  *inv.stdout_ << os.str();
  return kOk;
}

inline int cmd_synth(Invocation& inv) {
  require(!inv.out.empty(), "synth needs --out");
  require(inv.data_given, "synth needs --data synth:<spec>");
  const auto data = parse_data_spec(inv.config.data);
  require(data.synthetic, "synth needs a synth: data spec");
  for (const char* split : {"train", "val"}) save_camvid_format(load_split(data, split), inv.out, split);
  emit_stanza(inv);
  *inv.stdout_ << "wrote " << data.train.count << " train and " << data.val_count << " val samples to " << inv.out
               << "\n";
  return kOk;
}

template <typename T>
int dispatch(Invocation& inv) {
  const auto& c = inv.command;
  if (c == "train") return cmd_train<T>(inv);
  if (c == "eval") return cmd_eval<T>(inv);
  if (c == "surgery") return cmd_surgery<T>(inv);
  if (c == "ablate") return cmd_ablate<T>(inv);
  if (c == "norms") return cmd_norms<T>(inv);
  if (c == "compress") return cmd_compress<T>(inv);
  if (c == "retrain-reduced") return cmd_retrain_reduced<T>(inv);
  if (c == "count-params") return cmd_count_params<T>(inv);
  if (c == "rf") return cmd_rf<T>(inv);
  if (c == "synth") return cmd_synth(inv);
  throw UsageError("unknown command " + c);
}

/// Entry point. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"FC-DRN semantic segmentation: training, surgery and inspection"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_version_flag("--version", std::string("fcdrn ") + FCDRN_VERSION);

  Invocation inv;
  inv.log = &err;
  inv.stdout_ = &out;
  for (int i = 0; i < argc; ++i) inv.argv_line += (i ? " " : "") + std::string(argv[i]);

  // Flags that map onto RunConfig keys; only flags actually given override the config file / checkpoint.
  struct Binding {
    CLI::Option* opt;
    std::vector<std::string> keys;
    std::string value;
  };
  std::deque<Binding> bindings;
  std::string config_file;

  auto add_build = [&](CLI::App* s) {
    auto bind = [&](const std::string& flag, std::vector<std::string> keys, const std::string& help) {
      bindings.push_back({nullptr, std::move(keys), {}});
      bindings.back().opt = s->add_option(flag, bindings.back().value, help);
    };
    auto bind_flag = [&](const std::string& flag, const std::string& key, const std::string& help) {
      bindings.push_back({nullptr, {key}, "true"});
      bindings.back().opt = s->add_flag(flag, help);
    };
    bind("--variant", {"variant"}, "P, S or D (P-D / S-D come from surgery unless --from-scratch)");
    bind("--scale", {"scale"}, "channel width multiplier");
    bind("--blocks-per-stage", {"blocks_per_stage"}, "residual blocks per ResNet stage");
    bind("--classes", {"classes"}, "output classes (defaults to the data's class count)");
    bind("--seed", {"seed"}, "initialisation and training seed");
    bind("--dtype", {"dtype"}, "f32 or f64");
    bind_flag("--from-scratch", "from_scratch", "allow building P-D / S-D directly");
    s->add_option("--config", config_file, "key = value file; explicit flags take precedence");
  };
  auto add_train = [&](CLI::App* s) {
    auto bind = [&](const std::string& flag, std::vector<std::string> keys, const std::string& help) {
      bindings.push_back({nullptr, std::move(keys), {}});
      bindings.back().opt = s->add_option(flag, bindings.back().value, help);
    };
    bind("--epochs", {"max_epochs"}, "maximum epochs");
    bind("--patience", {"patience"}, "early-stopping patience in epochs");
    bind("--batch-size", {"batch_size"}, "mini-batch size");
    bind("--crop", {"crop_h", "crop_w"}, "square training crop, 0 for full images");
    bind("--lr", {"lr0"}, "initial learning rate");
    bind("--lr-decay", {"lr_decay"}, "per-epoch learning-rate decay");
    bind("--weight-decay", {"weight_decay"}, "L2 weight decay");
    bind("--dropout", {"dropout"}, "dropout probability");
    bindings.push_back({nullptr, {"soft_targets"}, "true"});
    bindings.back().opt = s->add_flag("--soft-targets", "train on 0.9 / 0.01 soft targets");
  };
  auto add_data = [&](CLI::App* s) {
    bindings.push_back({nullptr, {"data"}, {}});
    bindings.back().opt = s->add_option("--data", bindings.back().value, "synth:key=value,... or camvid:<root>");
  };
  auto add_out = [&](CLI::App* s, bool required = false) {
    auto* o = s->add_option("--out", inv.out, "output directory");
    if (required) o->required();
  };
  auto add_from = [&](CLI::App* s) { s->add_option("--from", inv.from, "checkpoint directory"); };
  auto add_split = [&](CLI::App* s) { s->add_option("--split", inv.split, "train, val or test (default val)"); };
  auto add_quiet = [&](CLI::App* s) { s->add_flag("--quiet", inv.quiet, "no per-epoch progress on stderr"); };

  auto* train_cmd = app.add_subcommand("train", "train a model and keep the best-validation checkpoint");
  add_build(train_cmd);
  add_train(train_cmd);
  add_data(train_cmd);
  add_out(train_cmd);
  add_quiet(train_cmd);
  train_cmd->add_option("--resume", inv.resume, "continue from a checkpoint (e.g. <run>/last or a surgery output)");

  auto* eval_cmd = app.add_subcommand("eval", "per-class IoU, mean IoU and global accuracy");
  add_from(eval_cmd);
  add_data(eval_cmd);
  add_split(eval_cmd);
  add_out(eval_cmd);
  add_build(eval_cmd);

  auto* surgery_cmd = app.add_subcommand("surgery", "turn a trained P or S model into P-D or S-D");
  add_from(surgery_cmd);
  add_out(surgery_cmd);
  surgery_cmd->add_option("--rates", inv.rates, "dilation rates for the last two downsampling slots (default 4,8)");
  add_build(surgery_cmd);

  auto* ablate_cmd = app.add_subcommand("ablate", "evaluate with each ResNet cut back to its first block");
  add_from(ablate_cmd);
  add_data(ablate_cmd);
  add_split(ablate_cmd);
  add_out(ablate_cmd);
  add_build(ablate_cmd);

  auto* norms_cmd = app.add_subcommand("norms", "weight-norm profile of every residual conv");
  add_from(norms_cmd);
  add_out(norms_cmd);
  add_build(norms_cmd);

  auto* compress_cmd = app.add_subcommand("compress", "remove residual blocks whose final-conv norm is small");
  add_from(compress_cmd);
  add_out(compress_cmd);
  add_data(compress_cmd);
  add_split(compress_cmd);
  add_build(compress_cmd);
  compress_cmd->add_option("--threshold", inv.threshold, "norm threshold");
  compress_cmd->add_option("--stage-threshold", inv.stage_thresholds, "per-stage overrides, e.g. 3=0.1,7=0.2");

  auto* retrain_cmd = app.add_subcommand("retrain-reduced", "compare compressed, retrained and retrained-no-wd");
  add_from(retrain_cmd);
  add_out(retrain_cmd);
  add_data(retrain_cmd);
  add_build(retrain_cmd);
  add_train(retrain_cmd);
  add_quiet(retrain_cmd);
  retrain_cmd->add_option("--threshold", inv.threshold, "norm threshold");

  auto* count_cmd = app.add_subcommand("count-params", "per-block listing and total parameter count");
  add_build(count_cmd);
  add_from(count_cmd);
  add_out(count_cmd);

  auto* rf_cmd = app.add_subcommand("rf", "receptive field after every stage");
  add_build(rf_cmd);
  add_from(rf_cmd);
  add_out(rf_cmd);

  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset in CamVid layout");
  add_data(synth_cmd);
  add_out(synth_cmd);
  add_build(synth_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }
  inv.command = app.get_subcommands().front()->get_name();

  try {
    RunConfig& c = inv.config;
    // Resuming and retraining keep the original run's settings unless flags say otherwise.
    const std::string& base_ckpt = inv.command == "retrain-reduced" ? inv.from : inv.resume;
    if (!base_ckpt.empty()) {
      std::ifstream is(std::filesystem::path(base_ckpt) / "manifest.json");
      if (!is) throw DataError("no checkpoint at " + base_ckpt);
      const auto j = nlohmann::json::parse(is, nullptr, false);
      if (!j.is_discarded() && j.contains("extra") && j["extra"].contains("config")) {
        c = parse_config(j["extra"]["config"].get<std::string>());
      }
    }
    if (!config_file.empty()) c = load_config(config_file, c);
    bool classes_given = false;
    for (const auto& b : bindings) {
      if (b.opt->count() == 0) continue;
      for (const auto& k : b.keys) {
        set_config_value(c, k, b.value);
        if (k == "classes") classes_given = true;
      }
    }
    inv.data_given = !c.data.empty();
    if (inv.data_given && !classes_given && base_ckpt.empty()) {
      c.plan.classes = data_classes(parse_data_spec(c.data));
    }
    c.plan.validate();
    c.train.validate();
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataFailure;
  } catch (const Error& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    return inv.config.dtype == "f64" ? dispatch<double>(inv) : dispatch<float>(inv);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumericalFailure;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataFailure;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kDataFailure;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
}

}  // namespace fcdrn::cli
