#pragma once

#include <filesystem>
#include <random>

#include "json.hpp"
#include "mlunet/image_io.hpp"
#include "mlunet/metrics.hpp"

namespace mlunet {

/// One image/mask pair in planar layout: image 3×H×W in [0,1], mask H×W in {0,1}.
struct Sample {
  std::string id;
  std::size_t height = 0, width = 0;
  std::vector<double> image;
  std::vector<double> mask;
};

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split: " + s);
}

struct ManifestEntry {
  std::string id;
  std::string image_path;  // relative to the manifest root unless absolute
  std::string mask_path;
  Split split = Split::train;
};

struct DatasetManifest {
  std::string root;
  std::size_t height = 256, width = 256;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> of(Split s) const {
    std::vector<ManifestEntry> out;
    for (auto& e : entries)
      if (e.split == s) out.push_back(e);
    return out;
  }
  std::string resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_absolute() || root.empty() ? p : (std::filesystem::path(root) / path).string();
  }
};

inline void validate_manifest(const DatasetManifest& m) {
  std::map<std::string, Split> seen;
  for (auto& e : m.entries) {
    auto [it, fresh] = seen.emplace(e.id, e.split);
    if (!fresh) throw std::invalid_argument("manifest: id '" + e.id + "' appears more than once");
  }
}

inline DatasetManifest read_manifest(const std::string& path) {
  const auto j = nlohmann::json::parse(read_text_file(path));
  DatasetManifest m;
  m.root = j.value("root", std::string{});
  if (m.root.empty() || std::filesystem::path(m.root).is_relative())
    m.root = (std::filesystem::path(path).parent_path() / m.root).lexically_normal().string();
  if (j.contains("image_size")) {
    auto v = j.at("image_size").get<std::vector<std::size_t>>();
    if (v.size() != 2) throw std::invalid_argument("manifest: image_size needs [H, W]");
    m.height = v[0];
    m.width = v[1];
  }
  for (auto& e : j.at("entries")) {
    ManifestEntry me;
    me.image_path = e.at("image").get<std::string>();
    me.mask_path = e.at("mask").get<std::string>();
    me.split = parse_split(e.value("split", std::string("train")));
    me.id = e.value("id", std::filesystem::path(me.image_path).stem().string());
    m.entries.push_back(me);
  }
  validate_manifest(m);
  return m;
}

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
  nlohmann::json j;
  j["root"] = m.root;
  j["image_size"] = {m.height, m.width};
  j["entries"] = nlohmann::json::array();
  for (auto& e : m.entries)
    j["entries"].push_back({{"id", e.id}, {"image", e.image_path}, {"mask", e.mask_path}, {"split", to_string(e.split)}});
  write_text_file(path, j.dump(2) + "\n");
}

/// Image: bilinear to the target size, scaled by 1/255. Mask: nearest, then ≥ 0.5 → 1.
inline Sample load_pair(const DatasetManifest& m, const ManifestEntry& e, std::size_t H, std::size_t W) {
  const Image img = read_pnm(m.resolve(e.image_path));
  const Image msk = read_pnm(m.resolve(e.mask_path));
  if (img.width != msk.width || img.height != msk.height)
    throw IoError("image/mask size mismatch for sample " + e.id);
  const std::size_t h = img.height, w = img.width;
  std::vector<double> planar(3 * h * w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        planar[(c * h + y) * w + x] = img.at(y, x, img.channels == 3 ? c : 0);
  planar = resize_bilinear(planar, 3, h, w, H, W);
  for (auto& v : planar) v /= 255.0;
  std::vector<double> mplane(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    double v = 0;
    for (std::size_t c = 0; c < msk.channels; ++c) v += msk.data[i * msk.channels + c];
    mplane[i] = v / static_cast<double>(msk.channels) / 255.0;
  }
  mplane = resize_nearest(mplane, h, w, H, W);
  for (auto& v : mplane) v = v >= 0.5 ? 1.0 : 0.0;
  return {e.id, H, W, std::move(planar), std::move(mplane)};
}

/// Deterministic shuffle, then contiguous train/val/test blocks. Sizes are the
/// floors of n·ratio with the remainder handed out by largest fractional part.
inline std::array<std::vector<std::string>, 3> make_split(std::vector<std::string> ids, std::array<double, 3> ratios,
                                                          std::uint64_t seed) {
  double total = 0;
  for (double r : ratios) {
    if (r < 0 || !std::isfinite(r)) throw std::invalid_argument("make_split: ratios must be non-negative");
    total += r;
  }
  if (total <= 0) throw std::invalid_argument("make_split: ratios sum to zero");
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t n = ids.size();
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> frac{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * ratios[i] / total;
    sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[i] = exact - static_cast<double>(sizes[i]);
    used += sizes[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (std::size_t r = 0; used < n; ++r, ++used) ++sizes[order[r % 3]];
  std::array<std::vector<std::string>, 3> out;
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) {
    out[i].assign(ids.begin() + static_cast<std::ptrdiff_t>(pos), ids.begin() + static_cast<std::ptrdiff_t>(pos + sizes[i]));
    pos += sizes[i];
  }
  return out;
}

/// Values in [0,1] to an 8-bit PGM. Probabilities are scaled by 255 and rounded half-up;
/// binary masks are written as {0, 255}.
inline void save_mask(const std::vector<double>& values, std::size_t H, std::size_t W, const std::string& path,
                      bool as_probability) {
  if (values.size() != H * W) throw ShapeError("save_mask: value count does not match H*W");
  Image img{W, H, 1, std::vector<std::uint8_t>(H * W)};
  for (std::size_t i = 0; i < H * W; ++i) {
    const double v = values[i];
    if (!(v >= 0 && v <= 1)) throw std::invalid_argument("save_mask: values must lie in [0,1]");
    img.data[i] = as_probability ? static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5)) : (v >= 0.5 ? 255 : 0);
  }
  write_pnm(path, img);
}

/// Planar [0,1] RGB to an 8-bit PPM.
inline void save_image(const std::vector<double>& planar, std::size_t H, std::size_t W, const std::string& path) {
  Image img{W, H, 3, std::vector<std::uint8_t>(3 * H * W)};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < H * W; ++i)
      img.data[i * 3 + c] = static_cast<std::uint8_t>(std::floor(std::clamp(planar[c * H * W + i], 0.0, 1.0) * 255.0 + 0.5));
  write_pnm(path, img);
}

}  // namespace mlunet
