// Flat key=value run configuration covering every build and training field.
#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "fcdrn/architecture.hpp"
#include "fcdrn/train.hpp"

namespace fcdrn {

struct RunConfig {
  VariantSpec variant;
  ChannelPlan plan;
  bool from_scratch = false;
  TrainConfig train;
  std::string data;  // empty when the command reads no dataset
  std::string dtype = "f32";
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename V>
V parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  V out{};
  is >> out;
  if (!is || !(is >> std::ws).eof()) throw Error("config: bad value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error("config: bad boolean '" + v + "' for " + key);
}

template <std::size_t N>
std::array<int, N> parse_ints(const std::string& key, const std::string& v) {
  std::array<int, N> out{};
  std::istringstream is(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(is, item, ',')) {
    if (i == N) throw Error("config: too many values for " + key);
    out[i++] = parse_number<int>(key, trim(item));
  }
  if (i != N) throw Error("config: " + key + " needs " + std::to_string(N) + " comma-separated values");
  return out;
}

template <std::size_t N>
std::string join(const std::array<int, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(a[i]);
  return s;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Applies one key. Unknown keys are errors so typos never pass silently.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  auto& t = c.train;
  if (key == "variant") c.variant.family = family_from_string(v);
  else if (key == "scale") c.plan.scale = parse_number<double>(key, v);
  else if (key == "blocks_per_stage") c.plan.blocks_per_stage = parse_number<int>(key, v);
  else if (key == "classes") c.plan.classes = parse_number<int>(key, v);
  else if (key == "input_channels") c.plan.input_channels = parse_number<int>(key, v);
  else if (key == "from_scratch") c.from_scratch = parse_bool(key, v);
  else if (key == "dilation_rates") c.variant.dilation_rates = parse_ints<4>(key, v);
  else if (key == "surgery_rates") c.variant.surgery_rates = parse_ints<2>(key, v);
  else if (key == "multigrid") {
    if (v != "uniform" && v != "doubling") throw Error("config: multigrid must be uniform or doubling");
    c.variant.multigrid = v == "uniform" ? MultigridPattern::Uniform : MultigridPattern::Doubling;
  } else if (key == "dilated_up_kernel") c.variant.dilated_up_kernel = parse_number<int>(key, v);
  else if (key == "lr0") t.lr0 = parse_number<double>(key, v);
  else if (key == "lr_decay") t.lr_decay = parse_number<double>(key, v);
  else if (key == "weight_decay") t.weight_decay = parse_number<double>(key, v);
  else if (key == "dropout") t.dropout = parse_number<double>(key, v);
  else if (key == "dropout_kind") {
    if (v != "element" && v != "channel") throw Error("config: dropout_kind must be element or channel");
    t.dropout_kind = v == "element" ? DropoutKind::Element : DropoutKind::Channel;
  } else if (key == "crop_h") t.crop_h = parse_number<int>(key, v);
  else if (key == "crop_w") t.crop_w = parse_number<int>(key, v);
  else if (key == "hflip_prob") t.hflip_prob = parse_number<double>(key, v);
  else if (key == "patience") t.patience = parse_number<int>(key, v);
  else if (key == "soft_targets") t.soft_targets = parse_bool(key, v);
  else if (key == "batch_size") t.batch_size = parse_number<int>(key, v);
  else if (key == "max_epochs") t.max_epochs = parse_number<int>(key, v);
  else if (key == "seed") t.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "rho") t.rho = parse_number<double>(key, v);
  else if (key == "eps") t.eps = parse_number<double>(key, v);
  else if (key == "train_eval_every") t.train_eval_every = parse_number<int>(key, v);
  else if (key == "data") c.data = v;
  else if (key == "dtype") {
    if (v != "f32" && v != "f64") throw Error("config: dtype must be f32 or f64");
    c.dtype = v;
  } else throw Error("config: unknown key '" + key + "'");
}

/// Lines are `key = value`; blank lines and lines starting with # are skipped.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(base, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
    } catch (const Error& e) {
      throw Error("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Canonical text: every key, fixed order, full precision. parse_config(config_to_text(c)) == c.
inline std::string config_to_text(const RunConfig& c) {
  using detail::num;
  const auto& t = c.train;
  std::ostringstream os;
  os << "variant = " << to_string(c.variant.family) << "\n"
     << "scale = " << num(c.plan.scale) << "\n"
     << "blocks_per_stage = " << c.plan.blocks_per_stage << "\n"
     << "classes = " << c.plan.classes << "\n"
     << "input_channels = " << c.plan.input_channels << "\n"
     << "from_scratch = " << (c.from_scratch ? "true" : "false") << "\n"
     << "dilation_rates = " << detail::join(c.variant.dilation_rates) << "\n"
     << "surgery_rates = " << detail::join(c.variant.surgery_rates) << "\n"
     << "multigrid = " << (c.variant.multigrid == MultigridPattern::Uniform ? "uniform" : "doubling") << "\n"
     << "dilated_up_kernel = " << c.variant.dilated_up_kernel << "\n"
     << "lr0 = " << num(t.lr0) << "\n"
     << "lr_decay = " << num(t.lr_decay) << "\n"
     << "weight_decay = " << num(t.weight_decay) << "\n"
     << "dropout = " << num(t.dropout) << "\n"
     << "dropout_kind = " << (t.dropout_kind == DropoutKind::Element ? "element" : "channel") << "\n"
     << "crop_h = " << t.crop_h << "\n"
     << "crop_w = " << t.crop_w << "\n"
     << "hflip_prob = " << num(t.hflip_prob) << "\n"
     << "patience = " << t.patience << "\n"
     << "soft_targets = " << (t.soft_targets ? "true" : "false") << "\n"
     << "batch_size = " << t.batch_size << "\n"
     << "max_epochs = " << t.max_epochs << "\n"
     << "seed = " << t.seed << "\n"
     << "rho = " << num(t.rho) << "\n"
     << "eps = " << num(t.eps) << "\n"
     << "train_eval_every = " << t.train_eval_every << "\n"
     << "data = " << c.data << "\n"
     << "dtype = " << c.dtype << "\n";
  return os.str();
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config_to_text(c))));
  return buf;
}

}  // namespace fcdrn
