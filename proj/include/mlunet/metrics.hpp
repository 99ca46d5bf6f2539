#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "mlunet/tensor.hpp"

namespace mlunet {

/// Row-major binary mask.
struct Mask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t operator()(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
  }
};

template <typename It>
Mask binarize(It first, It last, std::size_t H, std::size_t W, double threshold = 0.5) {
  Mask m{H, W, {}};
  m.data.reserve(H * W);
  for (; first != last; ++first) m.data.push_back(static_cast<double>(*first) >= threshold ? 1 : 0);
  if (m.data.size() != H * W) throw ShapeError("binarize: value count does not match H*W");
  return m;
}

template <typename T>
Mask binarize(std::span<const T> p, std::size_t H, std::size_t W, double threshold = 0.5) {
  return binarize(p.begin(), p.end(), H, W, threshold);
}

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline ConfusionCounts confusion(const Mask& pred, const Mask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw ShapeError("confusion: mask shapes differ");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i], g = gt.data[i];
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

struct OverlapMetrics {
  double iou = 1, dsc = 1, ac = 1, se = 1, sp = 1;
};

/// Division where 0/0 counts as a perfect score.
inline double ratio_or_one(double num, double den) { return den == 0 ? 1.0 : num / den; }

inline OverlapMetrics overlap_metrics(const ConfusionCounts& c) {
  const double tp = double(c.tp), fp = double(c.fp), fn = double(c.fn), tn = double(c.tn);
  OverlapMetrics m;
  m.iou = ratio_or_one(tp, tp + fp + fn);
  m.dsc = ratio_or_one(2 * tp, 2 * tp + fp + fn);
  m.ac = ratio_or_one(tp + tn, tp + tn + fp + fn);
  m.se = ratio_or_one(tp, tp + fn);
  m.sp = ratio_or_one(tn, tn + fp);
  return m;
}

/// Foreground pixels with at least one background 4-neighbour; outside the image is background.
inline std::vector<std::pair<std::size_t, std::size_t>> boundary_pixels(const Mask& m) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t H = m.height, W = m.width;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      if (!m(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == H || x + 1 == W || !m(y - 1, x) || !m(y + 1, x) ||
                        !m(y, x - 1) || !m(y, x + 1);
      if (edge) out.emplace_back(y, x);
    }
  return out;
}

namespace detail {

// 1D squared distance transform (lower envelope of parabolas).
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::size_t n, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::size_t k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  bool any = std::isfinite(f[0]);
  for (std::size_t q = 1; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    if (!any) {
      v[0] = q;
      any = true;
      continue;
    }
    double s;
    for (;;) {
      const double p = static_cast<double>(v[k]);
      const double qq = static_cast<double>(q);
      s = ((f[q] + qq * qq) - (f[v[k]] + p * p)) / (2 * qq - 2 * p);
      if (k > 0 && s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (!any) {
    for (std::size_t q = 0; q < n; ++q) d[q] = inf;
    return;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance from every pixel to the nearest set pixel in `sites`.
inline std::vector<double> squared_edt(const std::vector<std::uint8_t>& sites, std::size_t H, std::size_t W) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(H * W);
  const std::size_t n = std::max(H, W);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<std::size_t> v(n);
  for (std::size_t x = 0; x < W; ++x) {
    for (std::size_t y = 0; y < H; ++y) f[y] = sites[y * W + x] ? 0.0 : inf;
    detail::edt_1d(f, d, H, v, z);
    for (std::size_t y = 0; y < H; ++y) g[y * W + x] = d[y];
  }
  std::vector<double> out(H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) f[x] = g[y * W + x];
    detail::edt_1d(f, d, W, v, z);
    for (std::size_t x = 0; x < W; ++x) out[y * W + x] = d[x];
  }
  return out;
}

/// q-quantile with linear interpolation at index q·(n−1) of the sorted values.
inline double percentile_linear(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile_linear: empty input");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

enum class Hd95Mode { pooled, max_directed };

/// Directed nearest-boundary distances from every boundary pixel of `from` to the boundary of `to`.
inline std::vector<double> directed_boundary_distances(const Mask& from, const Mask& to) {
  const auto bf = boundary_pixels(from);
  const auto bt = boundary_pixels(to);
  std::vector<std::uint8_t> sites(to.height * to.width, 0);
  for (auto [y, x] : bt) sites[y * to.width + x] = 1;
  const auto dist2 = squared_edt(sites, to.height, to.width);
  std::vector<double> out;
  out.reserve(bf.size());
  for (auto [y, x] : bf) out.push_back(std::sqrt(dist2[y * to.width + x]));
  return out;
}

/// 95th-percentile Hausdorff distance in pixels. Both empty → 0; one empty → image diagonal.
inline double hd95(const Mask& gt, const Mask& pred, Hd95Mode mode = Hd95Mode::pooled) {
  if (gt.height != pred.height || gt.width != pred.width) throw ShapeError("hd95: mask shapes differ");
  const bool ge = gt.count() == 0, pe = pred.count() == 0;
  if (ge && pe) return 0.0;
  if (ge || pe) return std::hypot(static_cast<double>(gt.height), static_cast<double>(gt.width));
  auto a = directed_boundary_distances(gt, pred);
  auto b = directed_boundary_distances(pred, gt);
  if (mode == Hd95Mode::max_directed) return std::max(percentile_linear(a, 0.95), percentile_linear(b, 0.95));
  a.insert(a.end(), b.begin(), b.end());
  return percentile_linear(std::move(a), 0.95);
}

struct MetricsRecord {
  std::string sample_id;
  double iou = 0, dsc = 0, ac = 0, se = 0, sp = 0, hd95 = 0;
};

inline MetricsRecord evaluate_masks(const std::string& id, const Mask& pred, const Mask& gt,
                                    Hd95Mode mode = Hd95Mode::pooled) {
  const auto o = overlap_metrics(confusion(pred, gt));
  return {id, o.iou, o.dsc, o.ac, o.se, o.sp, hd95(gt, pred, mode)};
}

struct MetricsAggregate {
  MetricsRecord mean, sd;
};

/// Mean and population standard deviation of every field.
inline MetricsAggregate aggregate(const std::vector<MetricsRecord>& recs) {
  if (recs.empty()) throw std::invalid_argument("aggregate: no records");
  MetricsAggregate a;
  a.mean.sample_id = "mean";
  a.sd.sample_id = "sd";
  const double n = static_cast<double>(recs.size());
  auto field = [&](double MetricsRecord::*f) {
    double m = 0;
    for (auto& r : recs) m += r.*f;
    m /= n;
    double v = 0;
    for (auto& r : recs) v += (r.*f - m) * (r.*f - m);
    a.mean.*f = m;
    a.sd.*f = std::sqrt(v / n);
  };
  for (auto f : {&MetricsRecord::iou, &MetricsRecord::dsc, &MetricsRecord::ac, &MetricsRecord::se,
                 &MetricsRecord::sp, &MetricsRecord::hd95})
    field(f);
  return a;
}

inline constexpr const char* kMetricsCsvHeader = "sample_id,iou,dsc,ac,se,sp,hd95";

inline std::string metrics_csv(const std::vector<MetricsRecord>& recs) {
  std::ostringstream os;
  os << kMetricsCsvHeader << '\n' << std::setprecision(17);
  for (auto& r : recs)
    os << r.sample_id << ',' << r.iou << ',' << r.dsc << ',' << r.ac << ',' << r.se << ',' << r.sp << ',' << r.hd95
       << '\n';
  return os.str();
}

inline std::vector<MetricsRecord> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsCsvHeader) throw std::invalid_argument("metrics csv: bad header");
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    MetricsRecord r;
    std::string cell;
    std::getline(ls, r.sample_id, ',');
    for (auto f : {&MetricsRecord::iou, &MetricsRecord::dsc, &MetricsRecord::ac, &MetricsRecord::se,
                   &MetricsRecord::sp, &MetricsRecord::hd95}) {
      if (!std::getline(ls, cell, ',')) throw std::invalid_argument("metrics csv: short row");
      r.*f = std::stod(cell);
    }
    out.push_back(r);
  }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace mlunet
