// CamVid-format directory loader: <root>/<split>/images/*.png with index labels in <root>/<split>/labels/.
#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "fcdrn/data.hpp"
#include "fcdrn/png_io.hpp"

namespace fcdrn {

inline Dataset load_camvid_format(const std::filesystem::path& root, const std::string& split) {
  namespace fs = std::filesystem;
  const fs::path images = root / split / "images";
  const fs::path labels = root / split / "labels";
  if (!fs::is_directory(images)) throw DataError("missing image directory " + images.string());
  if (!fs::is_directory(labels)) throw DataError("missing label directory " + labels.string());

  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(images)) {
    if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  for (const auto& e : fs::directory_iterator(labels)) {
    const auto n = e.path().filename().string();
    if (e.path().extension() == ".png" && !std::binary_search(names.begin(), names.end(), n)) {
      throw DataError("label " + (labels / n).string() + " has no matching image");
    }
  }

  Dataset d;
  d.name = root.filename().string() + "/" + split;
  for (const auto& n : names) {
    if (!fs::exists(labels / n)) throw DataError("image " + (images / n).string() + " has no matching label");
    const auto rgb = read_png((images / n).string(), 3);
    const auto gray = read_png((labels / n).string(), 1);
    if (rgb.height != gray.height || rgb.width != gray.width) {
      throw DataError("image and label sizes differ for " + n);
    }
    LabelMap l({1, 1, gray.height, gray.width});
    for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
      const int v = gray.pixels[i];
      if (v > kCamVidVoid) {
        throw DataError("label file " + (labels / n).string() + " contains value " + std::to_string(v) +
                        " (classes are 0-10, void is 11)");
      }
      l[i] = v;
    }
    d.samples.push_back({rgb_to_tensor(rgb), std::move(l), n});
  }
  if (d.samples.empty()) throw DataError("no images in " + images.string());
  return d;
}

/// Writes a dataset in the same layout, used by `synth` and the loader tests.
inline void save_camvid_format(const Dataset& d, const std::filesystem::path& root, const std::string& split) {
  namespace fs = std::filesystem;
  fs::create_directories(root / split / "images");
  fs::create_directories(root / split / "labels");
  for (const auto& s : d.samples) {
    const std::string n = s.name.ends_with(".png") ? s.name : s.name + ".png";
    write_png((root / split / "images" / n).string(), tensor_to_rgb(s.image));
    write_png((root / split / "labels" / n).string(), labels_to_gray(s.labels));
  }
}

}  // namespace fcdrn
