#pragma once

#include <chrono>
#include <numbers>
#include <random>

#include "mlunet/checkpoint.hpp"
#include "mlunet/data_io.hpp"
#include "mlunet/loss.hpp"
#include "mlunet/metrics.hpp"

namespace mlunet {

struct AdamWConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
};

template <typename T>
struct AdamWSlot {
  std::vector<T> m, v;
};

template <typename T>
struct AdamWState {
  std::size_t step = 0;
  std::map<std::string, AdamWSlot<T>> slots;
};

/// One decoupled-decay Adam update of a single tensor. `t` is the 1-based step.
template <typename T>
void adamw_update(std::span<T> theta, std::span<const T> grad, AdamWSlot<T>& slot, std::size_t t, double lr,
                  const AdamWConfig& c) {
  if (theta.size() != grad.size()) throw ShapeError("adamw_update: parameter/gradient size mismatch");
  if (slot.m.size() != theta.size()) {
    slot.m.assign(theta.size(), T(0));
    slot.v.assign(theta.size(), T(0));
  }
  const double bc1 = 1 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad[i];
    double th = theta[i];
    th -= lr * c.weight_decay * th;
    const double m = c.beta1 * slot.m[i] + (1 - c.beta1) * g;
    const double v = c.beta2 * slot.v[i] + (1 - c.beta2) * g * g;
    slot.m[i] = static_cast<T>(m);
    slot.v[i] = static_cast<T>(v);
    th -= lr * (m / bc1) / (std::sqrt(v / bc2) + c.eps);
    theta[i] = static_cast<T>(th);
  }
}

/// Steps every trainable parameter that holds a gradient.
template <typename T>
void adamw_step(ParamStore<T>& store, AdamWState<T>& state, double lr, const AdamWConfig& c) {
  ++state.step;
  for (auto& p : store.params()) {
    if (!p.trainable) continue;
    Tensor<T> t = p.tensor;
    if (!t.has_grad()) continue;
    adamw_update<T>(t.mutable_data(), t.grad(), state.slots[p.name], state.step, lr, c);
  }
}

inline double cosine_lr(double step, double total_steps, double lr_init, double lr_min) {
  if (total_steps <= 0) return lr_init;
  if (step < 0 || step > total_steps) throw std::invalid_argument("cosine_lr: step out of range");
  return lr_min + 0.5 * (lr_init - lr_min) * (1 + std::cos(std::numbers::pi * step / total_steps));
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentDraw {
  bool hflip = false, vflip = false;
  int rot90 = 0;  // counter-clockwise quarter turns
};

namespace detail {

inline std::vector<double> transform_plane(const std::vector<double>& src, std::size_t C, std::size_t H,
                                           std::size_t W, const AugmentDraw& d) {
  std::vector<double> out(src.size());
  const int k = ((d.rot90 % 4) + 4) % 4;
  const std::size_t Ho = (k % 2) ? W : H, Wo = (k % 2) ? H : W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        std::size_t sy = d.vflip ? H - 1 - y : y;
        std::size_t sx = d.hflip ? W - 1 - x : x;
        std::size_t oy = y, ox = x;
        switch (k) {
          case 1: oy = W - 1 - x; ox = y; break;
          case 2: oy = H - 1 - y; ox = W - 1 - x; break;
          case 3: oy = x; ox = H - 1 - y; break;
          default: break;
        }
        out[(c * Ho + oy) * Wo + ox] = src[(c * H + sy) * W + sx];
      }
  return out;
}

}  // namespace detail

/// Applies one draw to image and mask alike. Quarter turns on non-square samples are rejected.
inline Sample apply_augment(const Sample& s, const AugmentDraw& d) {
  if (d.rot90 % 2 && s.height != s.width) throw std::invalid_argument("apply_augment: odd rotation of a non-square sample");
  Sample o = s;
  o.image = detail::transform_plane(s.image, 3, s.height, s.width, d);
  o.mask = detail::transform_plane(s.mask, 1, s.height, s.width, d);
  return o;
}

inline AugmentDraw draw_augment(std::mt19937_64& rng, bool square = true) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<int> quarter(0, 3);
  AugmentDraw d;
  d.hflip = coin(rng);
  d.vflip = coin(rng);
  d.rot90 = quarter(rng);
  if (!square) d.rot90 &= 2;
  return d;
}

inline std::vector<Sample> augment(const std::vector<Sample>& batch, std::mt19937_64& rng) {
  std::vector<Sample> out;
  out.reserve(batch.size());
  for (auto& s : batch) out.push_back(apply_augment(s, draw_augment(rng, s.height == s.width)));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic lesions

/// Soft-edged ellipses on a textured skin-like background. The mask is the ellipse interior.
inline std::vector<Sample> synth_dataset(std::size_t n, std::size_t size, std::uint64_t seed) {
  if (size == 0 || size % 32) throw std::invalid_argument("synth_dataset: size must be a positive multiple of 32");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.02);
  auto uni = [&](double a, double b) { return a + (b - a) * U(rng); };
  const double S = static_cast<double>(size);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "synth_%04zu", i);
    s.id = idbuf;
    s.height = s.width = size;
    s.image.assign(3 * size * size, 0.0);
    s.mask.assign(size * size, 0.0);
    double cx, cy, a, b, th;
    for (;;) {
      cx = uni(0.3, 0.7) * S;
      cy = uni(0.3, 0.7) * S;
      a = uni(0.12, 0.35) * S;
      b = uni(0.12, 0.35) * S;
      th = uni(0.0, std::numbers::pi);
      std::size_t fg = 0;
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double u = dx * std::cos(th) + dy * std::sin(th), v = -dx * std::sin(th) + dy * std::cos(th);
          fg += (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
        }
      const double frac = static_cast<double>(fg) / (S * S);
      if (frac >= 0.05 && frac <= 0.6) break;
    }
    const double skin[3] = {uni(0.75, 0.92), uni(0.55, 0.72), uni(0.45, 0.62)};
    const double lesion[3] = {uni(0.30, 0.55), uni(0.18, 0.35), uni(0.10, 0.25)};
    const double f1 = uni(2.0, 6.0) * 2 * std::numbers::pi / S, f2 = uni(2.0, 6.0) * 2 * std::numbers::pi / S;
    const double p1 = uni(0.0, 6.3), p2 = uni(0.0, 6.3);
    const double soft = uni(0.04, 0.12);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = dx * std::cos(th) + dy * std::sin(th), v = -dx * std::sin(th) + dy * std::cos(th);
        const double r = std::sqrt((u * u) / (a * a) + (v * v) / (b * b));
        const bool inside = r * r <= 1.0;
        s.mask[y * size + x] = inside ? 1.0 : 0.0;
        const double w = 1.0 / (1.0 + std::exp((r - 1.0) / soft));
        const double tex = 0.04 * std::sin(f1 * x + p1) * std::cos(f2 * y + p2);
        for (std::size_t c = 0; c < 3; ++c) {
          const double val = (1 - w) * skin[c] + w * lesion[c] + tex + noise(rng);
          s.image[(c * size + y) * size + x] = std::clamp(val, 0.0, 1.0);
        }
      }
    out.push_back(std::move(s));
  }
  return out;
}

/// Uniform subset without replacement of size round(fraction·n), in original order.
template <typename V>
std::vector<V> subsample_split(const std::vector<V>& items, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw std::invalid_argument("subsample_split: fraction must be in (0,1]");
  const std::size_t k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(items.size())));
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  std::vector<V> out;
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Batching and evaluation

template <typename T>
struct SampleBatch {
  Tensor<T> images;  // B×3×H×W
  Tensor<T> masks;   // B×1×H×W
  std::vector<std::string> ids;
};

template <typename T>
SampleBatch<T> make_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("make_batch: empty batch");
  const std::size_t H = samples[0].height, W = samples[0].width, B = samples.size();
  std::vector<T> img, msk;
  img.reserve(B * 3 * H * W);
  msk.reserve(B * H * W);
  SampleBatch<T> out;
  for (auto& s : samples) {
    if (s.height != H || s.width != W) throw ShapeError("make_batch: samples differ in size");
    for (double v : s.image) img.push_back(static_cast<T>(v));
    for (double v : s.mask) msk.push_back(static_cast<T>(v));
    out.ids.push_back(s.id);
  }
  out.images = Tensor<T>::from({B, 3, H, W}, std::move(img));
  out.masks = Tensor<T>::from({B, 1, H, W}, std::move(msk));
  return out;
}

template <typename T>
std::vector<MetricsRecord> evaluate_dataset(const Model<T>& m, const std::vector<Sample>& samples,
                                            Hd95Mode mode = Hd95Mode::pooled) {
  if (samples.empty()) throw std::invalid_argument("evaluate_dataset: no samples");
  std::vector<MetricsRecord> out;
  for (auto& s : samples) {
    auto b = make_batch<T>({s});
    auto p = forward_infer(m, b.images);
    const Mask pred = binarize<T>(p.data(), s.height, s.width);
    const Mask gt = binarize(s.mask.begin(), s.mask.end(), s.height, s.width);
    out.push_back(evaluate_masks(s.id, pred, gt, mode));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 8;
  double lr_init = 1e-3, lr_min = 1e-5;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  LossConfig loss;
  bool augment = true;
  double train_fraction = 1.0;
  bool per_iteration_schedule = false;

  void validate() const {
    if (!(lr_min < lr_init)) throw std::invalid_argument("train config: lr_min must be below lr_init");
    if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (epochs == 0) throw std::invalid_argument("train config: epochs must be >= 1");
    if (!(train_fraction > 0 && train_fraction <= 1)) throw std::invalid_argument("train config: train_fraction in (0,1]");
    if (!(loss.dice_smooth > 0)) throw std::invalid_argument("train config: dice_smooth must be positive");
  }
};

struct HistoryRow {
  std::size_t epoch = 0;
  double lr = 0, train_loss = 0, val_iou = 0, val_dsc = 0, val_hd95 = 0;
};

inline std::string history_csv(const std::vector<HistoryRow>& h) {
  std::ostringstream os;
  os << "epoch,lr,train_loss,val_iou,val_dsc,val_hd95\n" << std::setprecision(17);
  for (auto& r : h)
    os << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.val_iou << ',' << r.val_dsc << ',' << r.val_hd95
       << '\n';
  return os.str();
}

struct TrainResult {
  std::vector<HistoryRow> history;
  std::size_t best_epoch = 0;
  double best_val_iou = -1;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shuffle, batch, augment, step; validate each epoch and keep the best-IoU checkpoint
/// in out_dir/best.ckpt when out_dir is non-empty. An empty validation set falls
/// back to the training set.
template <typename T>
TrainResult train_loop(Model<T>& m, const std::vector<Sample>& train_all, const std::vector<Sample>& val,
                       const TrainConfig& cfg, const std::string& out_dir = {},
                       const std::function<void(const HistoryRow&)>& on_epoch = {}) {
  cfg.validate();
  if (train_all.empty()) throw std::invalid_argument("train_loop: no training samples");
  const auto train = subsample_split(train_all, cfg.train_fraction, cfg.seed);
  if (train.empty()) throw std::invalid_argument("train_loop: train_fraction leaves no samples");
  const auto& vset = val.empty() ? train : val;
  std::mt19937_64 rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
  AdamWState<T> opt;
  TrainResult res;
  const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = cfg.per_iteration_schedule ? double(cfg.epochs * per_epoch) : double(cfg.epochs);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double epoch_lr = cosine_lr(cfg.per_iteration_schedule ? double(global_step) : double(epoch), total_steps,
                                      cfg.lr_init, cfg.lr_min);
    double loss_sum = 0;
    for (std::size_t bi = 0; bi < per_epoch; ++bi) {
      std::vector<Sample> chunk;
      for (std::size_t i = bi * cfg.batch_size; i < std::min(train.size(), (bi + 1) * cfg.batch_size); ++i)
        chunk.push_back(train[order[i]]);
      if (cfg.augment) chunk = augment(chunk, rng);
      auto batch = make_batch<T>(chunk);
      m.store.zero_grad();
      Tensor<T> loss;
      try {
        loss = total_loss(forward(m, batch.images, true), batch.masks, cfg.loss);
        loss.backward();
      } catch (const NumericError& e) {
        throw TrainingError("non-finite value in epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) +
                            ": " + e.what());
      }
      const double lr = cfg.per_iteration_schedule ? cosine_lr(double(global_step), total_steps, cfg.lr_init, cfg.lr_min)
                                                   : epoch_lr;
      adamw_step(m.store, opt, lr, cfg.adamw);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(chunk.size());
      ++global_step;
    }
    const auto agg = aggregate(evaluate_dataset(m, vset));
    HistoryRow row{epoch, epoch_lr, loss_sum / static_cast<double>(train.size()), agg.mean.iou, agg.mean.dsc,
                   agg.mean.hd95};
    res.history.push_back(row);
    if (row.val_iou > res.best_val_iou) {
      res.best_val_iou = row.val_iou;
      res.best_epoch = epoch;
      if (!out_dir.empty()) save_checkpoint(m, (std::filesystem::path(out_dir) / "best.ckpt").string());
    }
    if (on_epoch) on_epoch(row);
  }
  return res;
}

}  // namespace mlunet
