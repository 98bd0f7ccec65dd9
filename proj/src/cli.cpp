#include "epanet/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "epanet/errors.hpp"
#include "epanet/verify.hpp"

namespace epanet::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- run directories

fs::path default_out_dir() {
  const char* env = std::getenv("EPANET_OUT_DIR");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("out");
}

fs::path prepare_run_dir(const fs::path& out_dir, const std::string& run_id, const json& resolved_config) {
  const fs::path dir = out_dir / run_id;
  if (fs::exists(dir)) throw ConfigError("run directory already exists: " + dir.string());
  for (const char* sub : {"checkpoints", "reports", "viz"}) fs::create_directories(dir / sub);
  const fs::path snapshot = dir / "config.snapshot";
  {
    std::ofstream out(snapshot);
    if (!out) throw ConfigError("cannot write " + snapshot.string());
    out << resolved_config.dump(2) << "\n";
  }
  fs::permissions(snapshot, fs::perms::owner_read | fs::perms::group_read | fs::perms::others_read,
                  fs::perm_options::replace);
  return dir;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

std::string timestamp_id(const std::string& command) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  localtime_r(&t, &tm);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s-%04d%02d%02d-%02d%02d%02d-%03lld", command.c_str(), tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<long long>(ms));
  return buf;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

// ---------------------------------------------------------------- options

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string device = "cpu";
  std::string out_dir;
  std::string run_id;
};

void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config, "JSON run config (version 1)");
  sub->add_option("--override", o.overrides, "key=value applied after parsing (repeatable)");
  sub->add_option("--seed", o.seed, "top-level seed (data, init and augmentation streams derive from it)");
  sub->add_option("--device", o.device, "compute device (cpu)");
  sub->add_option("--out-dir", o.out_dir, "output root (default $EPANET_OUT_DIR or ./out)");
  sub->add_option("--run-id", o.run_id, "run directory name (default: command and timestamp)");
}

struct Resolved {
  pipeline::RunConfig cfg;
  json doc;
  fs::path run_dir;
};

Resolved resolve(const std::string& command, const CommonOptions& o, std::ostream& out,
                 const std::optional<json>& fallback = std::nullopt) {
  if (o.device != "cpu") throw ConfigError("unsupported device '" + o.device + "' (this build runs on cpu only)");
  json doc;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw ConfigError("cannot open config " + o.config);
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + o.config + ": " + e.what());
    }
  } else if (fallback) {
    doc = *fallback;
  } else {
    doc = pipeline::to_json(pipeline::RunConfig{});
  }
  // Overrides address existing keys; fill the documented defaults first so a
  // short config file can still be overridden anywhere.
  json full = pipeline::to_json(pipeline::run_config_from_json(doc));
  if (doc.contains("model") && doc["model"].contains("topology_spec")) full["model"]["topology_spec"] = doc["model"]["topology_spec"];
  for (const auto& o_kv : o.overrides) {
    pipeline::apply_override(full, o_kv);
    out << "override " << o_kv << "\n";
  }
  if (o.seed) full["seed"] = *o.seed;
  Resolved r;
  r.cfg = pipeline::run_config_from_json(full);
  r.doc = pipeline::to_json(r.cfg);
  const fs::path out_dir = o.out_dir.empty() ? default_out_dir() : fs::path(o.out_dir);
  r.run_dir = prepare_run_dir(out_dir, o.run_id.empty() ? timestamp_id(command) : o.run_id, r.doc);
  if (!o.overrides.empty()) {
    std::string log;
    for (const auto& kv : o.overrides) log += kv + "\n";
    write_text(r.run_dir / "reports" / "overrides.log", log);
  }
  out << "run directory " << r.run_dir.string() << "\n";
  return r;
}

// ---------------------------------------------------------------- commands

int cmd_train(const CommonOptions& o, std::ostream& out) {
  auto r = resolve("train", o, out);
  const auto& cfg = r.cfg;
  const auto samples = pipeline::load_samples(cfg, false);
  out << "training on " << samples.size() << " images for " << cfg.train.steps << " steps\n";

  std::ofstream loss_log(r.run_dir / "reports" / "loss.csv");
  loss_log << "step,total,cls,box,lr\n";
  char line[256];
  auto result = pipeline::train(cfg, samples, [&](const pipeline::LossRecord& rec, detector::DetectorImpl& model) {
    std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g,%.17g\n", rec.step, rec.total, rec.cls, rec.box, rec.lr);
    loss_log << line;
    if (rec.step == 1 || rec.step % 50 == 0 || rec.step == cfg.train.steps) {
      out << "step " << rec.step << " loss " << fmt(rec.total, 6) << " (cls " << fmt(rec.cls, 6) << ", box "
          << fmt(rec.box, 6) << ")\n";
    }
    if (cfg.train.checkpoint_every > 0 && rec.step % cfg.train.checkpoint_every == 0 && rec.step != cfg.train.steps) {
      detector::save_checkpoint((r.run_dir / "checkpoints" / ("step_" + std::to_string(rec.step) + ".pt")).string(),
                                model, r.doc, rec.step);
    }
  });
  loss_log.close();
  const auto ckpt = r.run_dir / "checkpoints" / "final.pt";
  detector::save_checkpoint(ckpt.string(), *result.model, r.doc, cfg.train.steps);
  out << "checkpoint " << ckpt.string() << "\n";

  const auto eval_samples = pipeline::load_samples(cfg, true);
  const auto ev = pipeline::evaluate_model(*result.model, eval_samples, cfg.eval);
  write_text(r.run_dir / "reports" / "eval.txt", metrics::format_report(ev.report));
  write_text(r.run_dir / "reports" / "eval.json", metrics::to_json(ev.report).dump(2) + "\n");
  out << metrics::format_report(ev.report);
  return kSuccess;
}

detector::Checkpoint load_checkpoint_arg(const std::string& flag, const CommonOptions& o, json& fallback) {
  std::string path = flag;
  if (path.empty() && !o.config.empty()) {
    // The config may name it under eval.checkpoint.
    std::ifstream in(o.config);
    const auto doc = json::parse(in, nullptr, false);
    if (doc.is_object() && doc.contains("eval") && doc["eval"].contains("checkpoint"))
      path = doc["eval"]["checkpoint"].get<std::string>();
  }
  if (path.empty()) throw ConfigError("a checkpoint is required (--checkpoint or eval.checkpoint)");
  auto ckpt = detector::load_checkpoint(path);
  fallback = ckpt.run_config;
  return ckpt;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint, std::ostream& out) {
  json fallback;
  auto ckpt = load_checkpoint_arg(checkpoint, o, fallback);
  auto r = resolve("eval", o, out, fallback);
  r.cfg.model = ckpt.config;
  const auto samples = pipeline::load_samples(r.cfg, true);
  const auto ev = pipeline::evaluate_model(*ckpt.model, samples, r.cfg.eval);
  write_text(r.run_dir / "reports" / "eval.txt", metrics::format_report(ev.report));
  write_text(r.run_dir / "reports" / "eval.json", metrics::to_json(ev.report).dump(2) + "\n");
  std::ofstream dets(r.run_dir / "reports" / "detections.jsonl");
  metrics::write_detections_jsonl(dets, ev.detections);
  out << metrics::format_report(ev.report);
  return kSuccess;
}

struct BenchOptions {
  std::string presets;
  std::int64_t width = 64;
  std::int64_t input_size = 640;
  int latency_runs = 50;
  bool ablation = false;
  bool scale = false;
};

int cmd_bench(const CommonOptions& o, const BenchOptions& b, std::ostream& out) {
  auto r = resolve("bench", o, out);
  pipeline::set_deterministic();
  int code = kSuccess;
  const bool topology = !b.presets.empty() || (!b.ablation && !b.scale);
  if (topology) {
    std::vector<pyramid::Preset> presets;
    for (const auto& name : split_list(b.presets.empty() ? "fpn,bifpn,epa,panet" : b.presets))
      presets.push_back(pyramid::parse_preset(name));
    detector::ProfileOptions opts;
    opts.input_size = b.input_size;
    opts.timed_runs = b.latency_runs;
    opts.warmup = std::min(5, b.latency_runs);
    opts.measure_latency = b.latency_runs > 0;
    const auto report = verify::topology_report(presets, b.width, {{3, 64}, {4, 128}, {5, 256}}, opts);
    write_text(r.run_dir / "reports" / "topology.txt", verify::format_table(report));
    write_text(r.run_dir / "reports" / "topology.json", verify::to_json(report).dump(2) + "\n");
    out << verify::format_table(report);
    if (!report.ok()) code = kAssertionFailure;
  }
  if (b.scale) {
    const auto check = scale_check(r.cfg.model.num_classes);
    const auto text = format_scale_check(check);
    write_text(r.run_dir / "reports" / "scale_check.txt", text);
    write_text(r.run_dir / "reports" / "scale_check.json",
               json{{"params", check.params},
                    {"flops", check.flops},
                    {"params_deviation", check.params_deviation},
                    {"flops_deviation", check.flops_deviation},
                    {"within_tolerance", check.within()},
                    {"severity", check.within() ? "ok" : "warning"}}
                       .dump(2) +
                   "\n");
    out << text;  // soft check: never changes the exit code
  }
  if (b.ablation) {
    const auto rows = run_ablation(r.cfg);
    json j = json::array();
    for (const auto& row : rows) {
      j.push_back({{"backbone_bottleneck", row.backbone_bottleneck},
                   {"topology", row.topology},
                   {"params", row.params},
                   {"flops", row.flops},
                   {"first_loss", row.first_loss},
                   {"final_loss", row.final_loss},
                   {"map50", row.map50},
                   {"ok", row.ok()}});
      if (!row.ok()) code = kAssertionFailure;
    }
    write_text(r.run_dir / "reports" / "ablation.txt", format_ablation(rows));
    write_text(r.run_dir / "reports" / "ablation.json", j.dump(2) + "\n");
    out << format_ablation(rows);
  }
  return code;
}

int cmd_inspect(const CommonOptions& o, const std::string& export_topology, bool latency, std::ostream& out) {
  auto r = resolve("inspect", o, out);
  pipeline::set_deterministic();
  torch::manual_seed(pipeline::derive_seeds(r.cfg.seed).init);
  detector::Detector model(r.cfg.model);
  detector::ProfileOptions opts;
  opts.input_size = r.cfg.model.input_size;
  opts.measure_latency = latency;
  const auto profile = detector::profile_model(*model, opts);
  std::ostringstream text;
  text << model->summary();
  text << "profile at " << opts.input_size << "x" << opts.input_size << ", batch 1\n";
  text << "  params " << profile.params << "\n  FLOPs " << profile.flops << "\n";
  if (latency) text << "  latency_ms " << fmt(profile.latency_ms, 3) << " (median)\n";
  for (const auto& m : profile.modules) text << "  " << m.name << ": params " << m.params << ", FLOPs " << m.flops << "\n";
  for (const auto& m : profile.details) text << "    " << m.name << ": params " << m.params << ", FLOPs " << m.flops << "\n";
  write_text(r.run_dir / "reports" / "summary.txt", text.str());
  out << text.str();
  if (!export_topology.empty()) {
    pyramid::save_spec(model->neck->spec(), export_topology);
    out << "topology written to " << export_topology << "\n";
  }
  return kSuccess;
}

cv::Mat heatmap(const torch::Tensor& feature, int size) {
  auto m = feature.detach().abs().mean(0).to(torch::kDouble).contiguous();  // H x W
  const double lo = m.min().item<double>(), hi = m.max().item<double>();
  m = hi > lo ? (m - lo) / (hi - lo) : torch::zeros_like(m);
  cv::Mat gray(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8UC1);
  auto acc = m.accessor<double, 2>();
  for (int y = 0; y < gray.rows; ++y)
    for (int x = 0; x < gray.cols; ++x) gray.at<std::uint8_t>(y, x) = cv::saturate_cast<std::uint8_t>(acc[y][x] * 255);
  cv::Mat big, colour;
  cv::resize(gray, big, cv::Size(size, size), 0, 0, cv::INTER_NEAREST);
  cv::applyColorMap(big, colour, cv::COLORMAP_JET);
  return colour;
}

int cmd_viz(const CommonOptions& o, const std::string& checkpoint, int count, std::ostream& out) {
  json fallback;
  auto ckpt = load_checkpoint_arg(checkpoint, o, fallback);
  auto r = resolve("viz", o, out, fallback);
  r.cfg.model = ckpt.config;
  auto samples = pipeline::load_samples(r.cfg, true);
  if (static_cast<int>(samples.size()) > count) samples.resize(static_cast<std::size_t>(count));
  auto& model = *ckpt.model;
  model.eval();
  torch::NoGradGuard no_grad;
  const int display = std::max(256, static_cast<int>(r.cfg.model.input_size));
  const double scale = double(display) / double(r.cfg.model.input_size);
  std::size_t written = 0;
  for (const auto& s : samples) {
    const auto features = model.forward_features(pipeline::to_tensor({s}));
    for (const auto& [level, t] : features.backbone) {
      cv::imwrite((r.run_dir / "viz" / (s.image_id + "_C" + std::to_string(level) + ".png")).string(), heatmap(t[0], display));
      ++written;
    }
    for (const auto& id : model.neck->execution_order()) {
      cv::imwrite((r.run_dir / "viz" / (s.image_id + "_" + id + ".png")).string(), heatmap(features.neck.at(id)[0], display));
      ++written;
    }
    const auto dets = detector::decode_predictions(
        features.raw, {r.cfg.eval.conf_thresh, r.cfg.eval.nms_iou, static_cast<std::size_t>(r.cfg.eval.max_det)},
        {s.image_id});
    cv::Mat overlay;
    cv::resize(s.image, overlay, cv::Size(display, display), 0, 0, cv::INTER_NEAREST);
    auto rect = [&](const Box& b) {
      return cv::Rect(cv::Point(int(b.x1 * scale), int(b.y1 * scale)), cv::Point(int(b.x2 * scale), int(b.y2 * scale)));
    };
    for (const auto& g : s.boxes) cv::rectangle(overlay, rect(g.box), cv::Scalar(255, 128, 0), 1);
    for (const auto& d : dets.front()) {
      cv::rectangle(overlay, rect(d.box), cv::Scalar(0, 255, 0), 2);
      cv::putText(overlay, std::to_string(d.class_id) + ":" + fmt(d.score, 2),
                  cv::Point(int(d.box.x1 * scale), std::max(10, int(d.box.y1 * scale) - 3)), cv::FONT_HERSHEY_SIMPLEX,
                  0.4, cv::Scalar(0, 255, 0), 1);
    }
    cv::imwrite((r.run_dir / "viz" / (s.image_id + "_detections.png")).string(), overlay);
    ++written;
  }
  out << "wrote " << written << " images to " << (r.run_dir / "viz").string() << "\n";
  return kSuccess;
}

struct SynthOptions {
  int n = 0;
  int size = 0;
  int classes = 0;
  std::string split = "train";
  std::string dataset_root;
};

int cmd_synth(const CommonOptions& o, const SynthOptions& s, std::ostream& out) {
  auto r = resolve("synth", o, out);
  const int n = s.n > 0 ? s.n : r.cfg.data.synth_count;
  const int size = s.size > 0 ? s.size : static_cast<int>(r.cfg.model.input_size);
  const int classes = s.classes > 0 ? s.classes : r.cfg.data.classes;
  const fs::path root = s.dataset_root.empty() ? r.run_dir / "dataset" : fs::path(s.dataset_root);
  const auto samples = data::synth_dataset(pipeline::derive_seeds(r.cfg.seed).data, n, size, classes);
  data::write_yolo_dataset(samples, root, data::parse_split(s.split));
  out << "wrote " << samples.size() << " images to " << root.string() << "\n";
  return kSuccess;
}

}  // namespace

// ---------------------------------------------------------------- ablation / scale

std::vector<AblationRow> run_ablation(const pipeline::RunConfig& base) {
  std::vector<AblationRow> rows;
  const auto samples = pipeline::load_samples(base, false);
  const auto eval_samples = pipeline::load_samples(base, true);
  for (auto kind : {blocks::BottleneckKind::plain, blocks::BottleneckKind::msddsp}) {
    for (const char* topology : {"fpn", "epa"}) {
      auto cfg = base;
      cfg.model.topology = topology;
      cfg.model.topology_spec.reset();
      cfg.model.backbone_bottleneck = kind;
      auto result = pipeline::train(cfg, samples);
      AblationRow row;
      row.backbone_bottleneck = kind == blocks::BottleneckKind::plain ? "Bottleneck" : "MS-DDSP";
      row.topology = topology;
      detector::ProfileOptions opts;
      opts.input_size = cfg.model.input_size;
      opts.measure_latency = false;
      const auto profile = detector::profile_model(*result.model, opts);
      row.params = profile.params;
      row.flops = profile.flops;
      row.first_loss = result.log.front().total;
      row.final_loss = result.log.back().total;
      row.finite = std::isfinite(row.final_loss);
      row.halved = row.finite && row.final_loss <= 0.5 * row.first_loss;
      row.map50 = pipeline::evaluate_model(*result.model, eval_samples, cfg.eval).report.map50;
      rows.push_back(row);
    }
  }
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(12) << "backbone" << std::setw(10) << "neck" << std::right << std::setw(11) << "params"
      << std::setw(13) << "FLOPs" << std::setw(12) << "loss@1" << std::setw(12) << "loss@end" << std::setw(9)
      << "mAP50" << "  status\n";
  for (const auto& r : rows) {
    out << std::left << std::setw(12) << r.backbone_bottleneck << std::setw(10) << r.topology << std::right
        << std::setw(11) << r.params << std::setw(13) << r.flops << std::setw(12) << fmt(r.first_loss) << std::setw(12)
        << fmt(r.final_loss) << std::setw(9) << fmt(r.map50, 3) << "  "
        << (r.ok() ? "ok" : (!r.finite ? "diverged" : "loss not halved")) << "\n";
  }
  return out.str();
}

bool ScaleCheck::within() const {
  return std::abs(params_deviation) <= kParamsTolerance && std::abs(flops_deviation) <= kFlopsTolerance;
}

ScaleCheck scale_check(int num_classes) {
  torch::manual_seed(0);
  detector::Detector model(detector::DetectorConfig::small(num_classes, 640));
  detector::ProfileOptions opts;
  opts.input_size = 640;
  opts.measure_latency = false;
  const auto profile = detector::profile_model(*model, opts);
  ScaleCheck c;
  c.params = profile.params;
  c.flops = profile.flops;
  c.params_deviation = double(profile.params) / kReferenceParams - 1.0;
  c.flops_deviation = double(profile.flops) / kReferenceFlops - 1.0;
  return c;
}

std::string format_scale_check(const ScaleCheck& c) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(1);
  out << "s-scale profile at 640x640: params " << c.params / 1e6 << "M (reference 9.7M, "
      << (c.params_deviation >= 0 ? "+" : "") << c.params_deviation * 100 << "%, tolerance +/-25%), FLOPs "
      << c.flops / 1e9 << "G (reference 35G, " << (c.flops_deviation >= 0 ? "+" : "") << c.flops_deviation * 100
      << "%, tolerance +/-30%)\n";
  if (!c.within()) {
    out << "WARNING: outside the soft tolerance. The backbone, head and fusion wiring are reconstructions, so the "
           "absolute size is not expected to match; see README for the documented deviation.\n";
  }
  return out.str();
}

// ---------------------------------------------------------------- entry point

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"EPANet: efficient path aggregation detector toolkit", "epanet"};
  app.require_subcommand(1);

  CommonOptions common;
  std::string checkpoint;
  BenchOptions bench;
  SynthOptions synth;
  std::string export_topology;
  bool latency = false;
  int viz_count = 4;

  auto* train = app.add_subcommand("train", "train a detector and write checkpoints and the loss log");
  add_common(train, common);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint and write the metrics report");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file");

  auto* bench_cmd = app.add_subcommand("bench", "topology cost table, ablation and scale check");
  add_common(bench_cmd, common);
  bench_cmd->add_option("--presets", bench.presets, "comma-separated presets (default fpn,bifpn,epa,panet)");
  bench_cmd->add_option("--width", bench.width, "fusion node width for the topology table");
  bench_cmd->add_option("--input-size", bench.input_size, "input resolution for FLOPs and latency");
  bench_cmd->add_option("--latency-runs", bench.latency_runs, "timed forwards per preset (0 disables timing)");
  bench_cmd->add_flag("--ablation", bench.ablation, "backbone bottleneck x topology training ablation");
  bench_cmd->add_flag("--scale-check", bench.scale, "profile the s-comparable model against the reference size");

  auto* inspect = app.add_subcommand("inspect", "print the model summary and fusion graph");
  add_common(inspect, common);
  inspect->add_option("--export-topology", export_topology, "write the resolved topology spec to this file");
  inspect->add_flag("--latency", latency, "also time the forward pass");

  auto* viz = app.add_subcommand("viz", "write feature heatmaps and detection overlays");
  add_common(viz, common);
  viz->add_option("--checkpoint", checkpoint, "checkpoint file");
  viz->add_option("--count", viz_count, "number of images");

  auto* synth_cmd = app.add_subcommand("synth", "materialize a synthetic dataset in YOLO layout");
  add_common(synth_cmd, common);
  synth_cmd->add_option("--n", synth.n, "number of images (default data.synth_count)");
  synth_cmd->add_option("--size", synth.size, "image size (default model.input_size)");
  synth_cmd->add_option("--classes", synth.classes, "number of classes (default data.classes)");
  synth_cmd->add_option("--split", synth.split, "split name");
  synth_cmd->add_option("--dataset-root", synth.dataset_root, "dataset root (default <run>/dataset)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kConfigError;
  }

  try {
    if (*train) return cmd_train(common, out);
    if (*eval) return cmd_eval(common, checkpoint, out);
    if (*bench_cmd) return cmd_bench(common, bench, out);
    if (*inspect) return cmd_inspect(common, export_topology, latency, out);
    if (*viz) return cmd_viz(common, checkpoint, viz_count, out);
    if (*synth_cmd) return cmd_synth(common, synth, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kConfigError;
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return kConfigError;
  } catch (const json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const c10::Error& e) {
    err << "error: " << e.what_without_backtrace() << "\n";
    return kConfigError;
  }
  return kConfigError;
}

}  // namespace epanet::cli
