// Checkpoint directory: manifest.json plus one little-endian float32 blob per tensor.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fcdrn/model.hpp"
#include "fcdrn/optim.hpp"
#include "json.hpp"

namespace fcdrn {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "fcdrn-checkpoint";

struct CheckpointMeta {
  int epoch = 0;
  double val_miou = 0.0;
  std::uint64_t seed = 0;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json descriptor_to_json(const ArchitectureDescriptor& d) {
  using nlohmann::json;
  json down = json::array(), up = json::array();
  for (auto k : d.down) down.push_back(to_string(k));
  for (auto k : d.up) up.push_back(to_string(k));
  const auto& p = d.plan;
  return {{"family", to_string(d.variant.family)},
          {"dilation_rates", d.variant.dilation_rates},
          {"surgery_rates", d.variant.surgery_rates},
          {"multigrid", d.variant.multigrid == MultigridPattern::Uniform ? "uniform" : "doubling"},
          {"dilated_up_kernel", d.variant.dilated_up_kernel},
          {"plan",
           {{"input_channels", p.input_channels},
            {"idb", p.idb},
            {"stages", p.stages},
            {"mixing", p.mixing},
            {"fub", p.fub},
            {"classes", p.classes},
            {"scale", p.scale},
            {"blocks_per_stage", p.blocks_per_stage}}},
          {"blocks", d.blocks},
          {"down", down},
          {"down_rates", d.down_rates},
          {"up", up}};
}

inline ArchitectureDescriptor descriptor_from_json(const nlohmann::json& j) {
  try {
    ArchitectureDescriptor d;
    d.variant.family = family_from_string(j.at("family").get<std::string>());
    d.variant.dilation_rates = j.at("dilation_rates").get<std::array<int, 4>>();
    d.variant.surgery_rates = j.at("surgery_rates").get<std::array<int, 2>>();
    const auto mg = j.at("multigrid").get<std::string>();
    if (mg != "uniform" && mg != "doubling") throw DataError("unknown multigrid pattern " + mg);
    d.variant.multigrid = mg == "uniform" ? MultigridPattern::Uniform : MultigridPattern::Doubling;
    d.variant.dilated_up_kernel = j.at("dilated_up_kernel").get<int>();
    const auto& p = j.at("plan");
    d.plan.input_channels = p.at("input_channels").get<int>();
    d.plan.idb = p.at("idb").get<int>();
    d.plan.stages = p.at("stages").get<std::array<int, kStageCount>>();
    d.plan.mixing = p.at("mixing").get<std::array<int, kStageCount>>();
    d.plan.fub = p.at("fub").get<int>();
    d.plan.classes = p.at("classes").get<int>();
    d.plan.scale = p.at("scale").get<double>();
    d.plan.blocks_per_stage = p.at("blocks_per_stage").get<int>();
    d.blocks = j.at("blocks").get<std::array<int, kStageCount>>();
    for (int i = 0; i < 4; ++i) {
      d.down[i] = transform_kind_from_string(j.at("down").at(i).get<std::string>());
      d.up[i] = transform_kind_from_string(j.at("up").at(i).get<std::string>());
    }
    d.down_rates = j.at("down_rates").get<std::array<int, 4>>();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed architecture descriptor: ") + e.what());
  } catch (const DataError&) {
    throw;
  } catch (const Error& e) {
    throw DataError(std::string("malformed architecture descriptor: ") + e.what());
  }
}

namespace detail {

template <typename T>
void write_blob(const std::filesystem::path& path, const Tensor<T>& t) {
  std::vector<unsigned char> bytes(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float f = static_cast<float>(t[i]);
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<unsigned char>(u >> (8 * b));
  }
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("cannot write " + path.string());
}

template <typename T>
void read_blob(const std::filesystem::path& path, const std::string& name, Tensor<T>& t) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: missing blob for tensor " + name + " (" + path.string() + ")");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() != t.size() * 4) {
    throw DataError("checkpoint: tensor " + name + " blob has " + std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(t.size() * 4) + " (truncated or wrong shape)");
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    float f;
    std::memcpy(&f, &u, 4);
    t[i] = static_cast<T>(f);
  }
}

inline nlohmann::json shape_json(const Shape& s) { return {s.n, s.c, s.h, s.w}; }

}  // namespace detail

/// `optimizer_state` maps parameter names to RMSProp running averages; stored as "opt.<name>".
template <typename T>
void save_checkpoint(ModelGraph<T>& model, const CheckpointMeta& meta, const std::filesystem::path& dir,
                     const std::map<std::string, Tensor<T>>* optimizer_state) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "tensors");
  nlohmann::json tensors = nlohmann::json::array();
  auto put = [&](const std::string& name, const std::string& kind, const Tensor<T>& t) {
    const std::string file = "tensors/" + name + ".bin";
    detail::write_blob(dir / file, t);
    tensors.push_back({{"name", name}, {"kind", kind}, {"shape", detail::shape_json(t.shape())}, {"file", file}});
  };
  model.visit_params([&](const std::string& n, Var<T>& v) { put(n, "param", v.value()); });
  model.visit_buffers([&](const std::string& n, Tensor<T>& t) { put(n, "buffer", t); });
  if (optimizer_state != nullptr) {
    for (const auto& [n, t] : *optimizer_state) put("opt." + n, "optimizer", t);
  }

  nlohmann::json manifest{{"format", kCheckpointFormat},
                          {"version", kCheckpointVersion},
                          {"architecture", descriptor_to_json(model.arch)},
                          {"variant", to_string(model.family())},
                          {"scale", model.arch.plan.scale},
                          {"epoch", meta.epoch},
                          {"val_miou", meta.val_miou},
                          {"seed", meta.seed},
                          {"rng_state", meta.rng_state},
                          {"extra", meta.extra},
                          {"tensors", tensors}};
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << "\n";
  if (!os) throw DataError("cannot write " + (dir / "manifest.json").string());
}

template <typename T>
void save_checkpoint(ModelGraph<T>& model, const CheckpointMeta& meta, const std::filesystem::path& dir,
                     RmsProp<T>* optimizer = nullptr) {
  std::map<std::string, Tensor<T>> state;
  if (optimizer != nullptr) optimizer->visit_state([&](const std::string& n, Tensor<T>& t) { state.emplace(n, t); });
  save_checkpoint(model, meta, dir, optimizer != nullptr ? &state : nullptr);
}

template <typename T>
struct LoadedCheckpoint {
  ModelGraph<T> model;
  CheckpointMeta meta;
  std::map<std::string, Tensor<T>> optimizer_state;  // keyed by parameter name
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw DataError("checkpoint: no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: unreadable manifest: ") + e.what());
  }
  if (manifest.value("format", std::string{}) != kCheckpointFormat) throw DataError("checkpoint: not an fcdrn checkpoint");
  const int version = manifest.value("version", -1);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: version " + std::to_string(version) + " not supported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }

  LoadedCheckpoint<T> out{ModelGraph<T>::build(descriptor_from_json(manifest.at("architecture")), 0), {}, {}};
  out.meta.epoch = manifest.value("epoch", 0);
  out.meta.val_miou = manifest.value("val_miou", 0.0);
  out.meta.seed = manifest.value("seed", std::uint64_t{0});
  out.meta.rng_state = manifest.value("rng_state", std::string{});
  out.meta.extra = manifest.value("extra", nlohmann::json::object());

  std::map<std::string, nlohmann::json> entries;
  for (const auto& t : manifest.at("tensors")) entries[t.at("name").get<std::string>()] = t;

  auto fill = [&](const std::string& name, Tensor<T>& t) {
    auto it = entries.find(name);
    if (it == entries.end()) throw DataError("checkpoint: missing tensor " + name);
    const auto shape = it->second.at("shape").get<std::array<int, 4>>();
    const Shape s{shape[0], shape[1], shape[2], shape[3]};
    if (s != t.shape()) {
      throw DataError("checkpoint: tensor " + name + " has shape " + s.str() + ", architecture expects " +
                      t.shape().str());
    }
    detail::read_blob(dir / it->second.at("file").get<std::string>(), name, t);
  };
  out.model.visit_params([&](const std::string& n, Var<T>& v) { fill(n, v.mutable_value()); });
  out.model.visit_buffers([&](const std::string& n, Tensor<T>& t) { fill(n, t); });
  out.model.visit_params([&](const std::string& n, Var<T>& v) {
    auto it = entries.find("opt." + n);
    if (it == entries.end()) return;
    Tensor<T> t(v.shape());
    fill("opt." + n, t);
    out.optimizer_state.emplace(n, std::move(t));
  });
  return out;
}

}  // namespace fcdrn
