#pragma once

#include <cstdlib>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "mlunet/gradcheck.hpp"
#include "mlunet/trainer.hpp"

namespace mlunet {

/// Everything a command needs, after config file and flag overrides are merged.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::string manifest;
  std::size_t synth_n = 8;
  std::size_t synth_size = 64;
  std::string output_dir;
};

inline void to_json(nlohmann::json& j, const RunConfig& r) {
  j = nlohmann::json{
      {"model", r.model},
      {"train",
       {{"epochs", r.train.epochs},
        {"batch_size", r.train.batch_size},
        {"lr_init", r.train.lr_init},
        {"lr_min", r.train.lr_min},
        {"weight_decay", r.train.adamw.weight_decay},
        {"augment", r.train.augment},
        {"train_fraction", r.train.train_fraction},
        {"per_iteration_schedule", r.train.per_iteration_schedule}}},
      {"loss", {{"mode", to_string(r.train.loss.mode)}, {"dice_smooth", r.train.loss.dice_smooth}}},
      {"seed", r.seed},
      {"data", {{"manifest", r.manifest}, {"synth_n", r.synth_n}, {"synth_size", r.synth_size}}},
      {"output_dir", r.output_dir}};
}

inline void from_json(const nlohmann::json& j, RunConfig& r) {
  if (j.contains("model")) r.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) {
    const auto& t = j.at("train");
    r.train.epochs = t.value("epochs", r.train.epochs);
    r.train.batch_size = t.value("batch_size", r.train.batch_size);
    r.train.lr_init = t.value("lr_init", r.train.lr_init);
    r.train.lr_min = t.value("lr_min", r.train.lr_min);
    r.train.adamw.weight_decay = t.value("weight_decay", r.train.adamw.weight_decay);
    r.train.augment = t.value("augment", r.train.augment);
    r.train.train_fraction = t.value("train_fraction", r.train.train_fraction);
    r.train.per_iteration_schedule = t.value("per_iteration_schedule", r.train.per_iteration_schedule);
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    if (l.contains("mode")) r.train.loss.mode = parse_loss_mode(l.at("mode").get<std::string>());
    r.train.loss.dice_smooth = l.value("dice_smooth", r.train.loss.dice_smooth);
  }
  r.seed = j.value("seed", r.seed);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    r.manifest = d.value("manifest", r.manifest);
    r.synth_n = d.value("synth_n", r.synth_n);
    r.synth_size = d.value("synth_size", r.synth_size);
  }
  r.output_dir = j.value("output_dir", r.output_dir);
}

inline std::string default_output_root() {
  const char* env = std::getenv("MLUNET_OUTPUT_ROOT");
  return env && *env ? env : "runs";
}

inline std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    const long long v = std::stoll(item, &pos);
    if (pos != item.size() || v <= 0) throw std::invalid_argument("expected positive integers, got '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline const std::map<std::string, std::array<std::size_t, 6>>& channel_presets() {
  static const std::map<std::string, std::array<std::size_t, 6>> p{{"C1", {8, 16, 24, 32, 48, 64}},
                                                                   {"C2", {8, 16, 32, 48, 64, 96}},
                                                                   {"C3", {16, 32, 48, 64, 96, 128}},
                                                                   {"C4", {8, 16, 32, 64, 128, 256}},
                                                                   {"C5", {16, 32, 64, 128, 256, 512}}};
  return p;
}

/// Flag values as parsed; only options actually given override the merged config.
struct Overrides {
  std::string config_file;
  std::string channels, layout, input_size, precision, loss, manifest, out;
  std::size_t branches = 0, heads = 0, d_state = 0, epochs = 0, batch_size = 0, synth_n = 0, synth_size = 0;
  double lr = 0, lr_min = 0, weight_decay = 0, train_fraction = 0, dice_smooth = 0;
  std::uint64_t seed = 0;
  bool no_amf = false, no_lgfm = false, no_cga = false, exact_zoh = false, no_augment = false, per_iter = false;
};

inline void add_common_options(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_file, "JSON run config; flags override its values");
  app->add_option("--seed", o.seed, "Root random seed");
  app->add_option("--out", o.out, "Output directory (default: $MLUNET_OUTPUT_ROOT/<command>)");
  app->add_option("--channels", o.channels, "Six comma-separated widths or a preset C1..C5");
  app->add_option("--branches", o.branches, "AMF/CGA split count");
  app->add_option("--heads", o.heads, "LGFM attention heads");
  app->add_option("--d-state", o.d_state, "S6 state size");
  app->add_option("--layout", o.layout, "Six letters P|M for encoder stages 1-5 and the bottleneck");
  app->add_flag("--no-amf", o.no_amf, "Drop AMF from mamba stages");
  app->add_flag("--no-lgfm", o.no_lgfm, "Drop LGFM from mamba stages");
  app->add_flag("--no-cga", o.no_cga, "Plain additive skips");
  app->add_flag("--exact-zoh", o.exact_zoh, "Exact zero-order-hold discretization of B");
  app->add_option("--input-size", o.input_size, "N or HxW, multiples of 32");
  app->add_option("--precision", o.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  app->add_option("--epochs", o.epochs);
  app->add_option("--batch-size", o.batch_size);
  app->add_option("--lr", o.lr, "Initial learning rate");
  app->add_option("--lr-min", o.lr_min, "Final cosine learning rate");
  app->add_option("--weight-decay", o.weight_decay);
  app->add_flag("--no-augment", o.no_augment);
  app->add_flag("--per-iteration-schedule", o.per_iter, "Cosine schedule over iterations instead of epochs");
  app->add_option("--train-fraction", o.train_fraction, "Fraction of the training split to use");
  app->add_option("--loss", o.loss, "bce, dice or both")->check(CLI::IsMember({"bce", "dice", "both"}));
  app->add_option("--dice-smooth", o.dice_smooth);
  app->add_option("--manifest", o.manifest, "Dataset manifest (JSON)");
  const bool synth = app->get_name() == "synth";
  app->add_option(synth ? "--n,--synth-n" : "--synth-n", o.synth_n, "Synthetic sample count when no manifest is given");
  app->add_option(synth ? "--size,--synth-size" : "--synth-size", o.synth_size, "Synthetic sample side");
}

inline RunConfig merge_config(const CLI::App* app, const Overrides& o, const std::string& command) {
  RunConfig r;
  if (!o.config_file.empty()) r = nlohmann::json::parse(read_text_file(o.config_file)).get<RunConfig>();
  auto given = [&](const char* name) { return app->count(name) > 0; };
  if (given("--seed")) r.seed = o.seed;
  if (given("--channels")) {
    auto it = channel_presets().find(o.channels);
    if (it != channel_presets().end()) {
      r.model.channels = it->second;
    } else {
      auto v = parse_size_list(o.channels);
      if (v.size() != 6) throw std::invalid_argument("--channels needs six values or a preset C1..C5");
      std::copy(v.begin(), v.end(), r.model.channels.begin());
    }
  }
  if (given("--branches")) r.model.branches = o.branches;
  if (given("--heads")) r.model.heads = o.heads;
  if (given("--d-state")) r.model.d_state = o.d_state;
  if (given("--layout")) {
    nlohmann::json j = r.model;
    j["stage_layout"] = o.layout;
    r.model = j.get<ModelConfig>();
  }
  if (o.no_amf) r.model.use_amf = false;
  if (o.no_lgfm) r.model.use_lgfm = false;
  if (o.no_cga) r.model.use_cga = false;
  if (o.exact_zoh) r.model.exact_zoh = true;
  if (given("--input-size")) {
    auto parts = split_list(o.input_size, 'x');
    if (parts.size() == 1) parts.push_back(parts[0]);
    if (parts.size() != 2) throw std::invalid_argument("--input-size expects N or HxW");
    r.model.input_h = parse_size_list(parts[0]).at(0);
    r.model.input_w = parse_size_list(parts[1]).at(0);
  }
  if (given("--precision")) r.model.precision = o.precision;
  if (given("--epochs")) r.train.epochs = o.epochs;
  if (given("--batch-size")) r.train.batch_size = o.batch_size;
  if (given("--lr")) r.train.lr_init = o.lr;
  if (given("--lr-min")) r.train.lr_min = o.lr_min;
  if (given("--weight-decay")) r.train.adamw.weight_decay = o.weight_decay;
  if (o.no_augment) r.train.augment = false;
  if (o.per_iter) r.train.per_iteration_schedule = true;
  if (given("--train-fraction")) r.train.train_fraction = o.train_fraction;
  if (given("--loss")) r.train.loss.mode = parse_loss_mode(o.loss);
  if (given("--dice-smooth")) r.train.loss.dice_smooth = o.dice_smooth;
  if (given("--manifest")) r.manifest = o.manifest;
  if (given("--synth-n")) r.synth_n = o.synth_n;
  if (given("--synth-size")) r.synth_size = o.synth_size;
  if (given("--out")) r.output_dir = o.out;
  if (r.output_dir.empty()) r.output_dir = (std::filesystem::path(default_output_root()) / command).string();
  r.train.seed = r.seed;
  r.model.validate();
  r.train.validate();
  if (r.manifest.empty() && (r.synth_n == 0 || r.synth_size == 0 || r.synth_size % 32))
    throw std::invalid_argument("synthetic data needs synth_n > 0 and synth_size a multiple of 32");
  return r;
}

inline void prepare_output(const RunConfig& r) {
  std::filesystem::create_directories(r.output_dir);
  write_text_file((std::filesystem::path(r.output_dir) / "effective_config.json").string(),
                  nlohmann::json(r).dump(2) + "\n");
}

inline std::string out_path(const RunConfig& r, const std::string& name) {
  return (std::filesystem::path(r.output_dir) / name).string();
}

/// Samples of one split. Without a manifest, a synthetic set is split 7:1:2.
inline std::vector<Sample> load_split(const RunConfig& r, Split split, std::size_t H, std::size_t W) {
  std::vector<Sample> out;
  if (r.manifest.empty()) {
    auto all = synth_dataset(r.synth_n, r.synth_size, r.seed);
    std::vector<std::string> ids;
    for (auto& s : all) ids.push_back(s.id);
    auto parts = make_split(ids, {0.7, 0.1, 0.2}, r.seed);
    const auto& want = parts[static_cast<int>(split)];
    for (auto& s : all)
      if (std::find(want.begin(), want.end(), s.id) != want.end()) out.push_back(s);
    for (auto& s : out) {
      if (s.height == H && s.width == W) continue;
      s.image = resize_bilinear(s.image, 3, s.height, s.width, H, W);
      s.mask = resize_nearest(s.mask, s.height, s.width, H, W);
      s.height = H;
      s.width = W;
    }
    return out;
  }
  const auto m = read_manifest(r.manifest);
  for (auto& e : m.of(split)) out.push_back(load_pair(m, e, H, W));
  return out;
}

// ---------------------------------------------------------------------------
// Commands

template <typename T>
int cmd_train(const RunConfig& r, std::ostream& os) {
  prepare_output(r);
  auto model = build_model<T>(r.model, r.seed);
  std::vector<Sample> train, val;
  if (r.manifest.empty()) {
    // synthetic runs fit and validate on the whole generated set
    train = synth_dataset(r.synth_n, r.synth_size, r.seed);
    for (auto& s : train)
      if (s.height != r.model.input_h || s.width != r.model.input_w) {
        s.image = resize_bilinear(s.image, 3, s.height, s.width, r.model.input_h, r.model.input_w);
        s.mask = resize_nearest(s.mask, s.height, s.width, r.model.input_h, r.model.input_w);
        s.height = r.model.input_h;
        s.width = r.model.input_w;
      }
  } else {
    train = load_split(r, Split::train, r.model.input_h, r.model.input_w);
    val = load_split(r, Split::val, r.model.input_h, r.model.input_w);
  }
  os << "training on " << train.size() << " samples, validating on " << (val.empty() ? train.size() : val.size())
     << "\n";
  auto res = train_loop(*model, train, val, r.train, r.output_dir, [&](const HistoryRow& h) {
    os << "epoch " << h.epoch << " lr " << h.lr << " loss " << h.train_loss << " val_iou " << h.val_iou << " val_dsc "
       << h.val_dsc << "\n";
  });
  write_text_file(out_path(r, "history.csv"), history_csv(res.history));
  save_checkpoint(*model, out_path(r, "last.ckpt"));
  os << "best epoch " << res.best_epoch << " val_iou " << res.best_val_iou << "\n";
  return 0;
}

inline std::string aggregate_csv(const MetricsAggregate& a) {
  return metrics_csv({a.mean, a.sd});
}

template <typename T>
int cmd_eval(const RunConfig& r, const std::string& ckpt, const std::string& split, Hd95Mode mode, std::ostream& os) {
  auto model = load_checkpoint<T>(ckpt);
  RunConfig eff = r;
  eff.model = model->config;
  prepare_output(eff);
  const auto samples = load_split(eff, parse_split(split), eff.model.input_h, eff.model.input_w);
  if (samples.empty()) throw std::invalid_argument("eval: split '" + split + "' is empty");
  const auto recs = evaluate_dataset(*model, samples, mode);
  const auto agg = aggregate(recs);
  write_text_file(out_path(eff, "per_sample.csv"), metrics_csv(recs));
  write_text_file(out_path(eff, "aggregate.csv"), aggregate_csv(agg));
  os << "samples " << recs.size() << " iou " << agg.mean.iou << "±" << agg.sd.iou << " dsc " << agg.mean.dsc << "±"
     << agg.sd.dsc << " hd95 " << agg.mean.hd95 << "\n";
  return 0;
}

template <typename T>
int cmd_predict(const RunConfig& r, const std::string& ckpt, const std::vector<std::string>& inputs, bool prob,
                bool dump, std::ostream& os) {
  auto model = load_checkpoint<T>(ckpt);
  RunConfig eff = r;
  eff.model = model->config;
  prepare_output(eff);
  const std::size_t H = eff.model.input_h, W = eff.model.input_w;
  std::vector<Sample> samples;
  if (!inputs.empty()) {
    for (auto& path : inputs) {
      const Image img = read_pnm(path);
      std::vector<double> planar(3 * img.height * img.width);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < img.height * img.width; ++i)
          planar[c * img.height * img.width + i] = img.data[i * img.channels + (img.channels == 3 ? c : 0)];
      planar = resize_bilinear(planar, 3, img.height, img.width, H, W);
      for (auto& v : planar) v /= 255.0;
      samples.push_back({std::filesystem::path(path).stem().string(), H, W, std::move(planar), {}});
    }
  } else {
    samples = load_split(eff, Split::test, H, W);
  }
  if (samples.empty()) throw std::invalid_argument("predict: no inputs");
  std::filesystem::create_directories(out_path(eff, "masks"));
  for (auto& s : samples) {
    auto x = make_batch<T>({Sample{s.id, H, W, s.image, std::vector<double>(H * W, 0.0)}}).images;
    auto p = forward_infer(*model, x);
    std::vector<double> vals(p.data().begin(), p.data().end());
    save_mask(vals, H, W, out_path(eff, "masks/" + s.id + ".pgm"), prob);
    if (dump) dump_activations(*model, x, out_path(eff, "dumps/" + s.id));
  }
  os << "wrote " << samples.size() << " masks to " << out_path(eff, "masks") << "\n";
  return 0;
}

inline std::string report_table(std::size_t total_params,
                                const std::map<std::string, std::size_t>& per_module, const FlopReport& fr) {
  std::ostringstream os;
  os << "module,params,gmacs\n";
  std::set<std::string> keys;
  for (auto& [k, _] : per_module) keys.insert(k);
  for (auto& [k, _] : fr.per_module) keys.insert(k);
  for (auto& k : keys) {
    auto pit = per_module.find(k);
    auto fit = fr.per_module.find(k);
    os << k << ',' << (pit == per_module.end() ? 0 : pit->second) << ',' << std::setprecision(6)
       << (fit == fr.per_module.end() ? 0.0 : double(fit->second) / 1e9) << '\n';
  }
  os << "total," << total_params << ',' << std::setprecision(6) << fr.total_gflops << '\n';
  return os.str();
}

template <typename T>
int cmd_report(const RunConfig& r, bool x2, std::ostream& os) {
  prepare_output(r);
  auto model = build_model<T>(r.model, r.seed);
  const auto pc = count_params(*model);
  const auto fr = estimate_flops(r.model, r.model.input_h, r.model.input_w, x2);
  const auto table = report_table(pc.total, pc.per_module, fr);
  write_text_file(out_path(r, "report.csv"), table);
  os << table;
  char buf[160];
  std::snprintf(buf, sizeof buf, "params %.3fM  %s %.3f @%zux%zu  layout %s\n", pc.total / 1e6,
                x2 ? "GFLOPs(2xMAC)" : "GFLOPs(MAC)", fr.total_gflops, r.model.input_h, r.model.input_w,
                layout_string(r.model).c_str());
  os << buf;
  return 0;
}

/// Full-model gradient check in double precision on sampled coordinates.
inline GradCheckReport model_gradcheck(ModelConfig cfg, std::size_t size, std::size_t coords, std::uint64_t seed) {
  cfg.input_h = cfg.input_w = size;
  cfg.precision = "f64";
  auto model = build_model<double>(cfg, seed);
  // non-zero alpha so the AMF residual path is exercised
  for (auto& p : model->store.params())
    if (p.name.size() >= 5 && p.name.compare(p.name.size() - 5, 5, "alpha") == 0) {
      Tensor<double> t = p.tensor;
      t.values()[0] = 0.3;
    }
  std::mt19937_64 rng(seed + 17);
  std::uniform_real_distribution<double> U(0, 1);
  std::vector<double> xv(3 * size * size), gv(size * size);
  for (auto& v : xv) v = U(rng);
  for (auto& v : gv) v = U(rng) < 0.4 ? 1.0 : 0.0;
  auto x = Tensor<double>::from({1, 3, size, size}, xv, true);
  auto g = Tensor<double>::from({1, 1, size, size}, gv);
  std::vector<std::pair<std::string, Tensor<double>>> tensors{{"input", x}};
  for (auto& p : model->store.params()) tensors.emplace_back(p.name, p.tensor);
  GradCheckOptions opt;
  opt.h = 1e-4;
  opt.tol = 1e-4;
  opt.max_coords_per_tensor = coords;
  opt.seed = seed;
  opt.refine_on_kink = true;
  opt.floor = 1e-6;  // deep-layer gradients near 1e-10 sit at finite-difference roundoff
  return finite_diff_check([&] { return total_loss(forward(*model, x, true), g); }, tensors, opt);
}

inline int cmd_gradcheck(const RunConfig& r, std::size_t size, std::size_t coords, std::ostream& os) {
  prepare_output(r);
  const auto rep = model_gradcheck(r.model, size, coords, r.seed);
  std::ostringstream line;
  line << std::setprecision(6) << "gradcheck model 1x3x" << size << "x" << size << " coords " << rep.checked
       << " refined " << rep.refined
       << " max_rel_err " << rep.max_rel_err << " worst " << rep.worst << " " << (rep.pass ? "PASS" : "FAIL") << "\n";
  write_text_file(out_path(r, "gradcheck.txt"), line.str());
  os << line.str();
  return rep.pass ? 0 : 1;
}

struct AblationRow {
  std::string label;
  std::size_t params = 0;
  double gflops = 0;
  bool trained = false;
  MetricsAggregate metrics;
};

inline std::string ablation_csv(const std::string& axis, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "axis,value,params,gflops,iou,dsc,hd95\n" << std::setprecision(10);
  for (auto& r : rows) {
    os << axis << ',' << r.label << ',' << r.params << ',' << r.gflops << ',';
    if (r.trained)
      os << r.metrics.mean.iou << ',' << r.metrics.mean.dsc << ',' << r.metrics.mean.hd95;
    else
      os << ",,";
    os << '\n';
  }
  return os.str();
}

inline ModelConfig apply_module_set(ModelConfig c, const std::string& v) {
  c.use_amf = c.use_lgfm = c.use_cga = false;
  if (v == "all") {
    c.use_amf = c.use_lgfm = c.use_cga = true;
    return c;
  }
  if (v == "none") return c;
  for (auto& part : split_list(v, '+')) {
    if (part == "amf") c.use_amf = true;
    else if (part == "lgfm") c.use_lgfm = true;
    else if (part == "cga") c.use_cga = true;
    else throw std::invalid_argument("modules axis: unknown module '" + part + "'");
  }
  return c;
}

template <typename T>
AblationRow ablation_point(const RunConfig& base, const std::string& label, std::size_t train_epochs) {
  base.model.validate();
  auto model = build_model<T>(base.model, base.seed);
  AblationRow row;
  row.label = label;
  row.params = count_params(*model).total;
  row.gflops = estimate_flops(base.model, base.model.input_h, base.model.input_w).total_gflops;
  if (train_epochs > 0) {
    auto data = synth_dataset(base.synth_n, base.model.input_h, base.seed);
    TrainConfig tc = base.train;
    tc.epochs = train_epochs;
    train_loop(*model, data, {}, tc);
    row.metrics = aggregate(evaluate_dataset(*model, data));
    row.trained = true;
  }
  return row;
}

template <typename T>
int cmd_ablate(const RunConfig& r, const std::string& axis, std::string values, std::size_t train_epochs,
               std::ostream& os) {
  static const std::set<std::string> axes{"modules", "branches", "channels", "input_size", "loss"};
  if (!axes.count(axis))
    throw std::invalid_argument("ablate: unknown axis '" + axis + "' (modules|branches|channels|input_size|loss)");
  prepare_output(r);
  if (values.empty()) {
    if (axis == "modules") values = "none,amf,amf+lgfm,all";
    else if (axis == "branches") values = "1,2,4,8,16";
    else if (axis == "channels") values = "C1,C2,C3,C4,C5";
    else if (axis == "input_size") values = "224,256,288,320,512";
    else if (axis == "loss") values = "bce,dice,both";
  }
  if (axis == "loss" && train_epochs == 0) throw std::invalid_argument("ablate: the loss axis needs --train-epochs > 0");
  std::vector<AblationRow> rows;
  for (auto& v : split_list(values, ',')) {
    RunConfig c = r;
    if (axis == "modules") c.model = apply_module_set(c.model, v);
    else if (axis == "branches") c.model.branches = parse_size_list(v).at(0);
    else if (axis == "channels") {
      auto it = channel_presets().find(v);
      if (it == channel_presets().end()) throw std::invalid_argument("channels axis: unknown preset " + v);
      c.model.channels = it->second;
    } else if (axis == "input_size") c.model.input_h = c.model.input_w = parse_size_list(v).at(0);
    else if (axis == "loss") c.train.loss.mode = parse_loss_mode(v);
    else throw std::invalid_argument("ablate: unknown axis '" + axis + "' (modules|branches|channels|input_size|loss)");
    rows.push_back(ablation_point<T>(c, v, train_epochs));
  }
  const auto csv = ablation_csv(axis, rows);
  write_text_file(out_path(r, "ablation_" + axis + ".csv"), csv);
  os << csv;
  return 0;
}

inline int cmd_synth(const RunConfig& r, std::ostream& os) {
  prepare_output(r);
  const auto data = synth_dataset(r.synth_n, r.synth_size, r.seed);
  std::filesystem::create_directories(out_path(r, "images"));
  std::filesystem::create_directories(out_path(r, "masks"));
  std::vector<std::string> ids;
  for (auto& s : data) ids.push_back(s.id);
  const auto parts = make_split(ids, {0.7, 0.1, 0.2}, r.seed);
  DatasetManifest m;
  m.root = "";
  m.height = m.width = r.synth_size;
  for (auto& s : data) {
    save_image(s.image, s.height, s.width, out_path(r, "images/" + s.id + ".ppm"));
    save_mask(s.mask, s.height, s.width, out_path(r, "masks/" + s.id + ".pgm"), false);
    Split sp = Split::train;
    for (int k = 0; k < 3; ++k)
      if (std::find(parts[k].begin(), parts[k].end(), s.id) != parts[k].end()) sp = static_cast<Split>(k);
    m.entries.push_back({s.id, "images/" + s.id + ".ppm", "masks/" + s.id + ".pgm", sp});
  }
  write_manifest(m, out_path(r, "manifest.json"));
  os << "wrote " << data.size() << " samples and " << out_path(r, "manifest.json") << "\n";
  return 0;
}

template <typename F>
int dispatch_precision(const std::string& precision, F&& f) {
  if (precision == "f64") return f(double{});
  return f(float{});
}

/// Entry point shared by the executable and the tests.
inline int run_command(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"MambaLiteUNet skin-lesion segmentation toolkit"};
  app.require_subcommand(1);
  Overrides o;
  std::string ckpt, split = "test", hd_mode = "pooled", axis, values;
  std::vector<std::string> inputs;
  bool prob = false, dump = false, x2 = false;
  std::size_t gc_size = 32, gc_coords = 6, train_epochs = 0;

  auto* train = app.add_subcommand("train", "Train a model; writes history.csv and checkpoints");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint; writes per-sample and aggregate CSVs");
  auto* predict = app.add_subcommand("predict", "Write predicted masks (and optional activation dumps)");
  auto* report = app.add_subcommand("report", "Parameter and FLOP table for a config");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full model");
  auto* ablate = app.add_subcommand("ablate", "Sweep one axis: modules, branches, channels, input_size, loss");
  auto* synth = app.add_subcommand("synth", "Write a synthetic lesion dataset and manifest");
  for (auto* sc : {train, eval, predict, report, gradcheck, ablate, synth}) add_common_options(sc, o);
  for (auto* sc : {eval, predict}) sc->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--hd95-mode", hd_mode, "pooled or max")->check(CLI::IsMember({"pooled", "max"}));
  predict->add_option("--input", inputs, "Input PPM/PGM images (default: test split)");
  predict->add_flag("--prob", prob, "Write probabilities instead of binary masks");
  predict->add_flag("--dump", dump, "Also write per-stage activation images");
  report->add_flag("--x2", x2, "Count one MAC as two FLOPs");
  gradcheck->add_option("--size", gc_size, "Input side (multiple of 32)");
  gradcheck->add_option("--coords", gc_coords, "Sampled coordinates per parameter tensor");
  ablate->add_option("--axis", axis, "modules|branches|channels|input_size|loss")->required();
  ablate->add_option("--values", values, "Comma-separated axis values");
  ablate->add_option("--train-epochs", train_epochs, "Train each point on synthetic data for this many epochs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, os, err);
  }
  try {
    CLI::App* sc = app.get_subcommands().front();
    const std::string name = sc->get_name();
    const RunConfig r = merge_config(sc, o, name);
    if (name == "train")
      return dispatch_precision(r.model.precision, [&](auto t) { return cmd_train<decltype(t)>(r, os); });
    if (name == "eval") {
      if (!std::filesystem::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt);
      const auto mode = hd_mode == "max" ? Hd95Mode::max_directed : Hd95Mode::pooled;
      return dispatch_precision(r.model.precision, [&](auto t) { return cmd_eval<decltype(t)>(r, ckpt, split, mode, os); });
    }
    if (name == "predict") {
      if (!std::filesystem::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt);
      return dispatch_precision(r.model.precision,
                                [&](auto t) { return cmd_predict<decltype(t)>(r, ckpt, inputs, prob, dump, os); });
    }
    if (name == "report")
      return dispatch_precision(r.model.precision, [&](auto t) { return cmd_report<decltype(t)>(r, x2, os); });
    if (name == "gradcheck") return cmd_gradcheck(r, gc_size, gc_coords, os);
    if (name == "ablate")
      return dispatch_precision(r.model.precision,
                                [&](auto t) { return cmd_ablate<decltype(t)>(r, axis, values, train_epochs, os); });
    if (name == "synth") return cmd_synth(r, os);
    err << "unknown command: " << name << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mlunet
