#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>

#include "json.hpp"
#include "mlunet/blocks.hpp"
#include "mlunet/image_io.hpp"

namespace mlunet {

enum class StageKind { plain, mamba };

struct ModelConfig {
  std::array<std::size_t, 6> channels{16, 32, 48, 64, 96, 128};
  std::size_t branches = 4;
  std::size_t heads = 8;
  std::size_t d_state = 8;
  // encoder stages 1..5 then the bottleneck; decoder level s mirrors encoder stage s
  std::array<StageKind, 6> stage_layout{StageKind::plain, StageKind::plain, StageKind::plain,
                                        StageKind::plain, StageKind::mamba, StageKind::plain};
  bool use_amf = true;
  bool use_lgfm = true;
  bool use_cga = true;
  std::size_t gn_groups = 4;
  std::size_t input_h = 256, input_w = 256;
  std::string precision = "f32";
  bool exact_zoh = false;

  bool is_mamba(std::size_t stage) const { return stage_layout.at(stage) == StageKind::mamba; }
  bool cga_at(std::size_t level) const { return use_cga && level < 5 && is_mamba(level); }

  void validate() const {
    for (std::size_t i = 0; i < 6; ++i) {
      if (channels[i] == 0) throw std::invalid_argument("config: channels must be positive");
      if (i && channels[i] <= channels[i - 1]) throw std::invalid_argument("config: channels must strictly increase");
      if (gn_groups == 0 || channels[i] % gn_groups != 0)
        throw std::invalid_argument("config: gn_groups=" + std::to_string(gn_groups) + " does not divide " +
                                    std::to_string(channels[i]));
      if (!is_mamba(i)) continue;
      if ((use_amf || (use_cga && i < 5)) && (branches == 0 || channels[i] % branches != 0))
        throw std::invalid_argument("config: branches=" + std::to_string(branches) + " does not divide mamba-stage width " +
                                    std::to_string(channels[i]));
      if (use_lgfm && (heads == 0 || channels[i] % heads != 0))
        throw std::invalid_argument("config: heads=" + std::to_string(heads) + " does not divide mamba-stage width " +
                                    std::to_string(channels[i]));
    }
    if (d_state == 0) throw std::invalid_argument("config: d_state must be positive");
    if (input_h == 0 || input_w == 0 || input_h % 32 || input_w % 32)
      throw std::invalid_argument("config: input size must be a positive multiple of 32");
    if (precision != "f32" && precision != "f64") throw std::invalid_argument("config: precision must be f32 or f64");
  }
};

inline std::string layout_string(const ModelConfig& c) {
  std::string s;
  for (auto k : c.stage_layout) s += k == StageKind::mamba ? 'M' : 'P';
  return s;
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"channels", c.channels},   {"branches", c.branches},   {"heads", c.heads},
                     {"d_state", c.d_state},     {"stage_layout", layout_string(c)},
                     {"use_amf", c.use_amf},     {"use_lgfm", c.use_lgfm},   {"use_cga", c.use_cga},
                     {"gn_groups", c.gn_groups}, {"input_size", {c.input_h, c.input_w}},
                     {"precision", c.precision}, {"exact_zoh", c.exact_zoh}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("channels")) {
    auto v = j.at("channels").get<std::vector<std::size_t>>();
    if (v.size() != 6) throw std::invalid_argument("config: channels needs 6 entries");
    std::copy(v.begin(), v.end(), c.channels.begin());
  }
  if (j.contains("branches")) c.branches = j.at("branches").get<std::size_t>();
  if (j.contains("heads")) c.heads = j.at("heads").get<std::size_t>();
  if (j.contains("d_state")) c.d_state = j.at("d_state").get<std::size_t>();
  if (j.contains("stage_layout")) {
    auto s = j.at("stage_layout").get<std::string>();
    if (s.size() != 6) throw std::invalid_argument("config: stage_layout needs 6 letters of P/M");
    for (std::size_t i = 0; i < 6; ++i) {
      if (s[i] != 'P' && s[i] != 'M') throw std::invalid_argument("config: stage_layout letters must be P or M");
      c.stage_layout[i] = s[i] == 'M' ? StageKind::mamba : StageKind::plain;
    }
  }
  if (j.contains("use_amf")) c.use_amf = j.at("use_amf").get<bool>();
  if (j.contains("use_lgfm")) c.use_lgfm = j.at("use_lgfm").get<bool>();
  if (j.contains("use_cga")) c.use_cga = j.at("use_cga").get<bool>();
  if (j.contains("gn_groups")) c.gn_groups = j.at("gn_groups").get<std::size_t>();
  if (j.contains("input_size")) {
    auto v = j.at("input_size").get<std::vector<std::size_t>>();
    if (v.size() != 2) throw std::invalid_argument("config: input_size needs [H, W]");
    c.input_h = v[0];
    c.input_w = v[1];
  }
  if (j.contains("precision")) c.precision = j.at("precision").get<std::string>();
  if (j.contains("exact_zoh")) c.exact_zoh = j.at("exact_zoh").get<bool>();
}

template <typename T>
struct ConvGnGelu {
  ConvLayer<T> conv;
  NormAffine<T> gn;
  std::size_t groups = 4;

  static ConvGnGelu make(const Scope<T>& s, std::size_t cin, std::size_t cout, std::size_t k, std::size_t groups) {
    return {ConvLayer<T>::make(s.sub("conv"), cin, cout, k), NormAffine<T>::make(s.sub("gn"), cout), groups};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return gelu(group_norm(conv(x), groups, gn.gamma, gn.beta)); }
};

template <typename T>
struct EncoderStage {
  ConvGnGelu<T> entry;
  std::optional<AMFParams<T>> amf;
  std::optional<LGFMParams<T>> lgfm;
};

template <typename T>
struct DecoderLevel {
  ConvGnGelu<T> reduce;  // 1×1 from the level below, applied before upsampling
  std::optional<CGAParams<T>> cga;
  std::optional<AMFParams<T>> amf;
  std::optional<LGFMParams<T>> lgfm;
};

template <typename T>
struct Model {
  ModelConfig config;
  std::uint64_t seed = 0;
  ParamStore<T> store;
  std::array<EncoderStage<T>, 6> encoder;  // [5] is the bottleneck
  std::array<DecoderLevel<T>, 5> decoder;  // decoder[s] produces level s+1
  ConvLayer<T> head;

  explicit Model(std::uint64_t s) : seed(s), store(s) {}
};

inline std::string encoder_name(std::size_t s) { return s == 5 ? "bottleneck" : "enc" + std::to_string(s + 1); }
inline std::string decoder_name(std::size_t s) { return "dec" + std::to_string(s + 1); }

template <typename T>
std::unique_ptr<Model<T>> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto m = std::make_unique<Model<T>>(seed);
  m->config = cfg;
  ParamStore<T>& st = m->store;
  const auto& ch = cfg.channels;
  std::size_t cin = 3;
  for (std::size_t s = 0; s < 6; ++s) {
    Scope<T> sc(st, encoder_name(s));
    auto& e = m->encoder[s];
    e.entry = ConvGnGelu<T>::make(sc.sub("entry"), cin, ch[s], 3, cfg.gn_groups);
    if (cfg.is_mamba(s)) {
      if (cfg.use_amf) e.amf = AMFParams<T>::make(sc.sub("amf"), ch[s], cfg.branches, cfg.d_state);
      if (cfg.use_lgfm) e.lgfm = LGFMParams<T>::make(sc.sub("lgfm"), ch[s], cfg.heads);
    }
    cin = ch[s];
  }
  for (std::size_t s = 5; s-- > 0;) {
    Scope<T> sc(st, decoder_name(s));
    auto& d = m->decoder[s];
    d.reduce = ConvGnGelu<T>::make(sc.sub("reduce"), ch[s + 1], ch[s], 1, cfg.gn_groups);
    if (cfg.cga_at(s)) d.cga = CGAParams<T>::make(sc.sub("cga"), ch[s], cfg.branches, cfg.d_state);
    if (cfg.is_mamba(s)) {
      if (cfg.use_amf) d.amf = AMFParams<T>::make(sc.sub("amf"), ch[s], cfg.branches, cfg.d_state);
      if (cfg.use_lgfm) d.lgfm = LGFMParams<T>::make(sc.sub("lgfm"), ch[s], cfg.heads);
    }
  }
  m->head = ConvLayer<T>::make(Scope<T>(st, "head"), ch[0], 1, 1);
  return m;
}

/// Called with (stage name, feature) for the 12 dump points.
template <typename T>
using ActivationSink = std::function<void(const std::string&, const Tensor<T>&)>;

template <typename T>
Tensor<T> mamba_body(const Tensor<T>& x, const std::optional<AMFParams<T>>& amf,
                     const std::optional<LGFMParams<T>>& lgfm, ScanOptions opt) {
  Tensor<T> y = x;
  if (amf) y = amf_forward(y, *amf, opt);
  if (lgfm) y = lgfm_forward(y, *lgfm);
  return y;
}

/// Full forward pass. training selects batch statistics for the CGA batch norm.
template <typename T>
Tensor<T> forward(const Model<T>& m, const Tensor<T>& x, bool training, const ActivationSink<T>& sink = {}) {
  detail::require_rank(x, 4, "forward");
  if (x.dim(1) != 3) throw ShapeError("forward: expected 3 input channels, got " + shape_str(x.shape()));
  if (x.dim(2) % 32 || x.dim(3) % 32 || x.dim(2) == 0 || x.dim(3) == 0)
    throw ShapeError("forward: spatial size must be a multiple of 32, got " + shape_str(x.shape()));
  const ScanOptions opt{m.config.exact_zoh};
  std::array<Tensor<T>, 5> skips;
  Tensor<T> h = x;
  for (std::size_t s = 0; s < 6; ++s) {
    const auto& e = m.encoder[s];
    h = mamba_body(e.entry(h), e.amf, e.lgfm, opt);
    if (sink) sink(encoder_name(s), h);
    if (s < 5) {
      skips[s] = h;
      h = max_pool2d(h);
    }
  }
  for (std::size_t s = 5; s-- > 0;) {
    const auto& d = m.decoder[s];
    h = upsample2x(d.reduce(h));
    Tensor<T> skip = d.cga ? cga_forward(skips[s], h, *d.cga, training, opt).x_att : skips[s];
    h = mamba_body(add(skip, h), d.amf, d.lgfm, opt);
    if (sink) sink(decoder_name(s), h);
  }
  auto p = sigmoid(m.head(h));
  if (sink) sink("output", p);
  return p;
}

template <typename T>
Tensor<T> forward_infer(const Model<T>& m, const Tensor<T>& x) {
  NoGradGuard ng;
  return forward(m, x, false);
}

struct ParamCount {
  std::size_t total = 0;
  std::size_t trainable = 0;
  std::map<std::string, std::size_t> per_module;
};

/// Module key: the parameter path without its leaf, cut to two components
/// ("enc5.amf.alpha" -> "enc5.amf", "head.weight" -> "head").
inline std::string module_key(const std::string& name) {
  const auto leaf = name.rfind('.');
  if (leaf == std::string::npos) return name;
  const std::string parent = name.substr(0, leaf);
  const auto a = parent.find('.');
  if (a == std::string::npos) return parent;
  const auto b = parent.find('.', a + 1);
  return b == std::string::npos ? parent : parent.substr(0, b);
}

template <typename T>
ParamCount count_params(const Model<T>& m) {
  ParamCount c;
  for (auto& p : m.store.params()) {
    c.total += p.tensor.size();
    if (p.trainable) c.trainable += p.tensor.size();
    c.per_module[module_key(p.name)] += p.tensor.size();
  }
  return c;
}

struct FlopReport {
  double total_gflops = 0;
  std::uint64_t total_macs = 0;
  std::map<std::string, std::uint64_t> per_module;  // MACs
};

namespace flops {

using u64 = std::uint64_t;
inline u64 conv(u64 cin, u64 cout, u64 k, u64 groups, u64 n) { return cout * (cin / groups) * k * k * n; }
inline u64 mamba(u64 C, u64 n, u64 ds) {
  const u64 per_dir = n * C * C + 2 * n * C * ds + 2 * n * C * ds;
  return 2 * n * C * C + conv(C, C, 3, C, n) + 4 * per_dir;
}
inline u64 amf(u64 C, u64 k, u64 n, u64 ds) {
  return k * mamba(C / k, n, ds) + 2 * (conv(C, C, 3, C, n) + conv(C, C, 1, 1, n));
}
inline u64 lgfm(u64 C, u64 n) {
  return conv(C, C, 3, C, n) + 4 * n * C * C + 2 * n * n * C + conv(2 * C, C, 1, 1, n) + conv(C, C, 3, C, n);
}
inline u64 cga(u64 C, u64 k, u64 n, u64 ds) {
  return 2 * k * mamba(C / k, n, ds) + 2 * k * conv(C / k, C / k, 3, C / k, n) + conv(C, 1, 3, 1, n);
}

}  // namespace flops

/// Analytic multiply-accumulate count per image. Norms, activations, pooling,
/// upsampling and elementwise work are not counted.
inline FlopReport estimate_flops(const ModelConfig& cfg, std::size_t H, std::size_t W, bool count_mac_as_two = false) {
  FlopReport r;
  const auto& ch = cfg.channels;
  const std::uint64_t ds = cfg.d_state, k = cfg.branches;
  auto put = [&](const std::string& key, std::uint64_t v) { r.per_module[key] += v; };
  std::uint64_t cin = 3;
  for (std::size_t s = 0; s < 6; ++s) {
    const std::uint64_t n = (H >> s) * (W >> s);
    const auto name = encoder_name(s);
    put(name + ".entry", flops::conv(cin, ch[s], 3, 1, n));
    if (cfg.is_mamba(s)) {
      if (cfg.use_amf) put(name + ".amf", flops::amf(ch[s], k, n, ds));
      if (cfg.use_lgfm) put(name + ".lgfm", flops::lgfm(ch[s], n));
    }
    cin = ch[s];
  }
  for (std::size_t s = 5; s-- > 0;) {
    const std::uint64_t n = (H >> s) * (W >> s), nlow = (H >> (s + 1)) * (W >> (s + 1));
    const auto name = decoder_name(s);
    put(name + ".reduce", flops::conv(ch[s + 1], ch[s], 1, 1, nlow));
    if (cfg.cga_at(s)) put(name + ".cga", flops::cga(ch[s], k, n, ds));
    if (cfg.is_mamba(s)) {
      if (cfg.use_amf) put(name + ".amf", flops::amf(ch[s], k, n, ds));
      if (cfg.use_lgfm) put(name + ".lgfm", flops::lgfm(ch[s], n));
    }
  }
  put("head", flops::conv(ch[0], 1, 1, 1, std::uint64_t(H) * W));
  for (auto& [_, v] : r.per_module) {
    if (count_mac_as_two) v *= 2;
    r.total_macs += v;
  }
  r.total_gflops = static_cast<double>(r.total_macs) / 1e9;
  return r;
}

template <typename T>
FlopReport estimate_flops(const Model<T>& m, std::size_t H, std::size_t W, bool count_mac_as_two = false) {
  return estimate_flops(m.config, H, W, count_mac_as_two);
}

/// Channel mean of a 1×C×H×W map, min-max normalized to 8 bits. A constant map becomes mid-gray.
template <typename T>
Image activation_to_image(const Tensor<T>& t) {
  if (t.rank() != 4 || t.dim(0) != 1) throw ShapeError("activation_to_image: expects 1×C×H×W");
  const std::size_t C = t.dim(1), H = t.dim(2), W = t.dim(3);
  std::vector<double> mean(H * W, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H * W; ++i) mean[i] += t[c * H * W + i];
  for (auto& v : mean) v /= static_cast<double>(C);
  const auto [lo, hi] = std::minmax_element(mean.begin(), mean.end());
  const double a = *lo, b = *hi;
  Image img{W, H, 1, std::vector<std::uint8_t>(H * W)};
  for (std::size_t i = 0; i < H * W; ++i)
    img.data[i] = b > a ? static_cast<std::uint8_t>(std::floor((mean[i] - a) / (b - a) * 255.0 + 0.5)) : 128;
  return img;
}

/// Probability map to 8 bits, p·255 rounded half-up.
template <typename T>
Image probability_to_image(const Tensor<T>& p) {
  if (p.rank() != 4 || p.dim(0) != 1 || p.dim(1) != 1) throw ShapeError("probability_to_image: expects 1×1×H×W");
  const std::size_t H = p.dim(2), W = p.dim(3);
  Image img{W, H, 1, std::vector<std::uint8_t>(H * W)};
  for (std::size_t i = 0; i < H * W; ++i) {
    const double v = std::clamp(static_cast<double>(p[i]), 0.0, 1.0);
    img.data[i] = static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
  }
  return img;
}

inline const std::array<std::string, 12>& dump_names() {
  static const std::array<std::string, 12> names{"00_encoder1", "01_encoder2", "02_encoder3",   "03_encoder4",
                                                 "04_encoder5", "05_bottleneck", "06_decoder5", "07_decoder4",
                                                 "08_decoder3", "09_decoder2", "10_decoder1",  "11_output"};
  return names;
}

/// Writes one PGM per stage into out_dir and returns the written paths.
template <typename T>
std::vector<std::string> dump_activations(const Model<T>& m, const Tensor<T>& x, const std::string& out_dir) {
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("dump_activations: batch size must be 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw IoError("cannot create dump directory: " + out_dir);
  std::vector<std::string> paths;
  std::size_t idx = 0;
  NoGradGuard ng;
  forward(m, x, false, ActivationSink<T>([&](const std::string& stage, const Tensor<T>& t) {
    const std::string path = (std::filesystem::path(out_dir) / (dump_names()[idx++] + ".pgm")).string();
    write_pnm(path, stage == "output" ? probability_to_image(t) : activation_to_image(t));
    paths.push_back(path);
  }));
  return paths;
}

}  // namespace mlunet
