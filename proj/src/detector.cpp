#include "epanet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "epanet/errors.hpp"
#include "epanet/metrics.hpp"

namespace epanet::detector {

namespace nn = torch::nn;
using json = nlohmann::json;

// ---------------------------------------------------------------- config

namespace {

std::int64_t make_divisible(double x, std::int64_t divisor) {
  return std::max<std::int64_t>(divisor, static_cast<std::int64_t>(std::ceil(x / divisor)) * divisor);
}

std::string_view bottleneck_name(blocks::BottleneckKind k) {
  return k == blocks::BottleneckKind::plain ? "plain" : "msddsp";
}

blocks::BottleneckKind parse_bottleneck(const std::string& s) {
  if (s == "plain") return blocks::BottleneckKind::plain;
  if (s == "msddsp") return blocks::BottleneckKind::msddsp;
  throw ConfigError("unknown bottleneck '" + s + "' (plain, msddsp)");
}

}  // namespace

void DetectorConfig::validate() const {
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
  if (width_scale <= 0.0 || depth_scale <= 0.0) throw ConfigError("width_scale and depth_scale must be positive");
  if (max_channels < 8) throw ConfigError("max_channels must be at least 8");
  if (neck_width < 8 || neck_width % 8 != 0) {
    throw ConfigError("neck_width must be a positive multiple of 8, got " + std::to_string(neck_width));
  }
  if (strides.empty()) throw ConfigError("strides must not be empty");
  const std::int64_t max_stride = *std::max_element(strides.begin(), strides.end());
  if (input_size <= 0 || input_size % 32 != 0 || input_size % max_stride != 0) {
    throw ConfigError("input_size " + std::to_string(input_size) + " must be a positive multiple of 32");
  }
  if (topology.empty() && !topology_spec) throw ConfigError("topology is empty");
}

DetectorConfig DetectorConfig::nano(int num_classes, std::int64_t input_size) {
  DetectorConfig cfg;
  cfg.num_classes = num_classes;
  cfg.input_size = input_size;
  cfg.width_scale = 0.25;
  cfg.depth_scale = 0.33;
  cfg.neck_width = 64;
  return cfg;
}

DetectorConfig DetectorConfig::small(int num_classes, std::int64_t input_size) {
  DetectorConfig cfg;
  cfg.num_classes = num_classes;
  cfg.input_size = input_size;
  cfg.width_scale = 0.5;
  cfg.depth_scale = 0.33;
  cfg.neck_width = 128;
  return cfg;
}

json to_json(const DetectorConfig& cfg) {
  json j{{"num_classes", cfg.num_classes},
         {"input_size", cfg.input_size},
         {"width_scale", cfg.width_scale},
         {"depth_scale", cfg.depth_scale},
         {"max_channels", cfg.max_channels},
         {"neck_width", cfg.neck_width},
         {"topology", cfg.topology},
         {"neck_bottleneck", bottleneck_name(cfg.neck_bottleneck)},
         {"backbone_bottleneck", bottleneck_name(cfg.backbone_bottleneck)},
         {"strides", cfg.strides}};
  if (cfg.topology_spec) j["topology_spec"] = pyramid::to_json(*cfg.topology_spec);
  return j;
}

DetectorConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  DetectorConfig cfg;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "num_classes") cfg.num_classes = value.get<int>();
      else if (key == "input_size") cfg.input_size = value.get<std::int64_t>();
      else if (key == "width_scale") cfg.width_scale = value.get<double>();
      else if (key == "depth_scale") cfg.depth_scale = value.get<double>();
      else if (key == "max_channels") cfg.max_channels = value.get<std::int64_t>();
      else if (key == "neck_width") cfg.neck_width = value.get<std::int64_t>();
      else if (key == "topology") cfg.topology = value.get<std::string>();
      else if (key == "topology_spec") cfg.topology_spec = pyramid::spec_from_json(value);
      else if (key == "neck_bottleneck") cfg.neck_bottleneck = parse_bottleneck(value.get<std::string>());
      else if (key == "backbone_bottleneck") cfg.backbone_bottleneck = parse_bottleneck(value.get<std::string>());
      else if (key == "strides") cfg.strides = value.get<std::vector<std::int64_t>>();
      else throw ConfigError("unknown model config key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("model config key '" + key + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

pyramid::FusionGraphSpec resolve_topology(const DetectorConfig& cfg) {
  pyramid::FusionGraphSpec spec;
  if (cfg.topology_spec) {
    spec = *cfg.topology_spec;
  } else if (cfg.topology.find('/') != std::string::npos || cfg.topology.ends_with(".json")) {
    spec = pyramid::load_spec(cfg.topology);
  } else {
    spec = pyramid::preset_topology(cfg.topology);
  }
  spec = pyramid::with_node_width(std::move(spec), cfg.neck_width);
  if (cfg.neck_bottleneck == blocks::BottleneckKind::plain) {
    spec = pyramid::with_bottleneck(std::move(spec), blocks::BottleneckKind::plain);
  }
  pyramid::validate(spec);
  return spec;
}

std::vector<std::int64_t> backbone_widths(const DetectorConfig& cfg) {
  std::vector<std::int64_t> widths;
  for (double base : {64.0, 128.0, 256.0, 512.0, 1024.0}) {
    widths.push_back(make_divisible(std::min<double>(base, static_cast<double>(cfg.max_channels)) * cfg.width_scale, 8));
  }
  return widths;
}

std::vector<std::int64_t> backbone_depths(const DetectorConfig& cfg) {
  std::vector<std::int64_t> depths;
  for (double base : {3.0, 6.0, 6.0, 3.0}) {
    depths.push_back(std::max<std::int64_t>(1, std::llround(base * cfg.depth_scale)));
  }
  return depths;
}

// ---------------------------------------------------------------- backbone

namespace {

class StageImpl : public nn::Module {
 public:
  StageImpl(std::int64_t in, std::int64_t out, std::int64_t depth, blocks::BottleneckKind kind) {
    down = register_module("down", blocks::Cbs(in, out, 3, 2));
    c2f = register_module("c2f", blocks::C2f(blocks::BlockConfig{out, out, 1, 1, 1, depth}, kind));
  }
  torch::Tensor forward(const torch::Tensor& x) { return c2f->forward(down->forward(x)); }

  blocks::Cbs down{nullptr};
  blocks::C2f c2f{nullptr};
};
TORCH_MODULE(Stage);

}  // namespace

BackboneImpl::BackboneImpl(const DetectorConfig& cfg) : widths_(backbone_widths(cfg)) {
  const auto depths = backbone_depths(cfg);
  stem = register_module("stem", blocks::Cbs(3, widths_[0], 3, 2));
  stages = register_module("stages", nn::ModuleList());
  for (std::size_t i = 0; i < depths.size(); ++i) {
    stages->push_back(Stage(widths_[i], widths_[i + 1], depths[i], cfg.backbone_bottleneck));
  }
}

std::map<int, torch::Tensor> BackboneImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != 3) {
    throw ConfigError("backbone expects a B x 3 x S x S image tensor");
  }
  if (image.size(2) % 32 != 0 || image.size(3) % 32 != 0) {
    throw ConfigError("input size " + std::to_string(image.size(2)) + "x" + std::to_string(image.size(3)) +
                      " is not divisible by 32; letterbox the image first");
  }
  std::map<int, torch::Tensor> levels;
  torch::Tensor x;
  {
    flops::Section section("stem");
    x = stem->forward(image);
  }
  for (std::size_t i = 0; i < stages->size(); ++i) {
    flops::Section section("stages." + std::to_string(i));
    x = stages[i]->as<StageImpl>()->forward(x);
    const int level = static_cast<int>(i) + 2;
    if (level >= 3) levels[level] = x;
  }
  return levels;
}

std::map<int, std::int64_t> BackboneImpl::level_widths() const {
  return {{3, widths_[2]}, {4, widths_[3]}, {5, widths_[4]}};
}

std::map<int, torch::Tensor> backbone_forward(BackboneImpl& backbone, const torch::Tensor& image) {
  return backbone.forward(image);
}

// ---------------------------------------------------------------- head

std::int64_t RawPredictions::total_cells() const {
  std::int64_t n = 0;
  for (const auto& t : levels) n += t.size(2) * t.size(3);
  return n;
}

namespace {

class HeadBranchImpl : public nn::Module {
 public:
  HeadBranchImpl(std::int64_t in, std::int64_t out) {
    cbs1 = register_module("cbs1", blocks::Cbs(in, in, 3, 1));
    cbs2 = register_module("cbs2", blocks::Cbs(in, in, 3, 1));
    pred = register_module("pred", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
  }
  torch::Tensor forward(const torch::Tensor& x) { return flops::conv(pred, cbs2->forward(cbs1->forward(x))); }

  blocks::Cbs cbs1{nullptr}, cbs2{nullptr};
  nn::Conv2d pred{nullptr};
};
TORCH_MODULE(HeadBranch);

}  // namespace

HeadImpl::HeadImpl(int num_classes, const std::vector<std::int64_t>& in_widths) : num_classes_(num_classes) {
  box_branches = register_module("box_branches", nn::ModuleList());
  cls_branches = register_module("cls_branches", nn::ModuleList());
  for (auto w : in_widths) {
    box_branches->push_back(HeadBranch(w, 4));
    cls_branches->push_back(HeadBranch(w, num_classes));
  }
}

std::vector<torch::Tensor> HeadImpl::forward(const std::vector<torch::Tensor>& features) {
  if (features.size() != box_branches->size()) {
    throw ConfigError("head expects " + std::to_string(box_branches->size()) + " feature levels, got " +
                      std::to_string(features.size()));
  }
  std::vector<torch::Tensor> out;
  for (std::size_t i = 0; i < features.size(); ++i) {
    flops::Section section("level." + std::to_string(i));
    auto box = box_branches[i]->as<HeadBranchImpl>()->forward(features[i]);
    auto cls = cls_branches[i]->as<HeadBranchImpl>()->forward(features[i]);
    out.push_back(torch::cat({box, cls}, 1));
  }
  return out;
}

void HeadImpl::init_class_prior(double p) {
  torch::NoGradGuard no_grad;
  const double bias = std::log(p / (1.0 - p));
  for (const auto& m : *cls_branches) m->as<HeadBranchImpl>()->pred->bias.fill_(bias);
}

RawPredictions head_forward(HeadImpl& head, const std::vector<torch::Tensor>& features, const DetectorConfig& cfg) {
  if (features.size() != cfg.strides.size()) {
    throw ConfigError("head: " + std::to_string(features.size()) + " feature levels for " +
                      std::to_string(cfg.strides.size()) + " strides");
  }
  RawPredictions raw;
  raw.levels = head.forward(features);
  raw.strides = cfg.strides;
  raw.num_classes = cfg.num_classes;
  raw.input_size = features.front().size(2) * cfg.strides.front();
  return raw;
}

// ---------------------------------------------------------------- detector

DetectorImpl::DetectorImpl(DetectorConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto spec = resolve_topology(cfg_);
  if (spec.outputs.size() != cfg_.strides.size()) {
    throw ConfigError("topology '" + spec.name + "' has " + std::to_string(spec.outputs.size()) + " outputs but " +
                      std::to_string(cfg_.strides.size()) + " strides are configured");
  }
  for (std::size_t i = 0; i < spec.outputs.size(); ++i) {
    const auto level = spec.find(spec.outputs[i])->level;
    if (cfg_.strides[i] != (std::int64_t{1} << level)) {
      throw ConfigError("stride " + std::to_string(cfg_.strides[i]) + " does not match output '" + spec.outputs[i] +
                        "' at level " + std::to_string(level));
    }
  }
  backbone = register_module("backbone", Backbone(cfg_));
  neck = register_module("neck", pyramid::FusionGraph(spec, backbone->level_widths()));
  head = register_module("head", Head(cfg_.num_classes, neck->output_widths()));
  head->init_class_prior(0.01);
}

DetectorImpl::Features DetectorImpl::forward_features(const torch::Tensor& images) {
  if (images.dim() == 4 && images.size(2) != images.size(3)) {
    throw ConfigError("detector expects square inputs; letterbox the image first");
  }
  Features f;
  {
    flops::Section section("backbone");
    f.backbone = backbone->forward(images);
  }
  {
    flops::Section section("neck");
    f.neck = neck->forward_all(f.backbone);
  }
  std::vector<torch::Tensor> outputs;
  for (const auto& id : neck->spec().outputs) outputs.push_back(f.neck.at(id));
  {
    flops::Section section("head");
    f.raw = head_forward(*head, outputs, cfg_);
  }
  f.raw.input_size = images.size(2);
  return f;
}

RawPredictions DetectorImpl::forward(const torch::Tensor& images) { return forward_features(images).raw; }

std::string DetectorImpl::summary() const {
  std::ostringstream out;
  const auto& spec = neck->spec();
  out << "EPANet detector: " << cfg_.num_classes << " classes, input " << cfg_.input_size << ", topology '"
      << spec.name << "'\n";
  out << "  backbone widths";
  for (auto w : backbone_widths(cfg_)) out << ' ' << w;
  out << ", depths";
  for (auto d : backbone_depths(cfg_)) out << ' ' << d;
  out << ", bottleneck " << bottleneck_name(cfg_.backbone_bottleneck) << "\n";

  out << "parameters\n";
  out << "  backbone " << blocks::count_params(*backbone) << "\n";
  out << "    stem " << blocks::count_params(*backbone->stem) << "\n";
  for (std::size_t i = 0; i < backbone->stages->size(); ++i)
    out << "    stages." << i << ' ' << blocks::count_params(*backbone->stages->ptr(i)) << "\n";
  out << "  neck " << blocks::count_params(*neck) << "\n";
  out << "  head " << blocks::count_params(*head) << "\n";
  out << "  total " << blocks::count_params(*this) << "\n";

  out << "fusion graph (execution order)\n";
  for (const auto& id : neck->execution_order()) {
    const auto& node = *spec.find(id);
    out << "  " << id << " [level " << node.level << ", " << pyramid::to_string(node.merge) << ", "
        << pyramid::to_string(node.block) << ", width " << node.width << "] params " << neck->node_params(id) << "\n";
    for (std::size_t i = 0; i < spec.edges.size(); ++i) {
      const auto& e = spec.edges[i];
      if (e.dst != id) continue;
      out << "    <- " << e.src << " via " << pyramid::to_string(e.transform);
      if (e.tag != pyramid::EdgeTag::baseline) out << " (" << pyramid::to_string(e.tag) << ")";
      out << " params " << neck->edge_params(i) << "\n";
    }
  }
  out << "  outputs";
  for (const auto& id : spec.outputs) out << ' ' << id;
  out << "\n";

  std::vector<std::string> notes;
  for (const auto& item : named_modules("", /*include_self=*/false)) {
    if (const auto* c2f = item.value()->as<blocks::C2fImpl>()) {
      if (!c2f->has_residual()) notes.push_back(item.key() + ": C2f outer residual dropped (width change)");
    }
  }
  for (const auto& n : notes) out << "note: " << n << "\n";
  return out.str();
}

// ---------------------------------------------------------------- box coding

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

double decode_distance(double raw, double stride) { return softplus(raw) * stride; }

double encode_distance(double distance, double stride) {
  const double y = std::max(distance, 1e-3 * stride) / stride;
  // log(expm1(y)) without overflow for large y.
  return y > 20.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

Box decode_box(double cx, double cy, const double raw[4], double stride) {
  return {cx - decode_distance(raw[0], stride), cy - decode_distance(raw[1], stride),
          cx + decode_distance(raw[2], stride), cy + decode_distance(raw[3], stride)};
}

void encode_box(const Box& box, double cx, double cy, double stride, double raw_out[4]) {
  raw_out[0] = encode_distance(cx - box.x1, stride);
  raw_out[1] = encode_distance(cy - box.y1, stride);
  raw_out[2] = encode_distance(box.x2 - cx, stride);
  raw_out[3] = encode_distance(box.y2 - cy, stride);
}

std::vector<Detection> class_wise_nms(std::vector<Detection> candidates, double nms_iou, std::size_t max_det) {
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (auto& c : candidates) {
    if (kept.size() >= max_det) break;
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == c.class_id && metrics::iou(k.box, c.box) > nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(std::move(c));
  }
  return kept;
}

std::vector<std::vector<Detection>> decode_predictions(const RawPredictions& raw, const DecodeOptions& options,
                                                       const std::vector<std::string>& image_ids) {
  const std::int64_t batch = raw.batch();
  if (!image_ids.empty() && static_cast<std::int64_t>(image_ids.size()) != batch) {
    throw ConfigError("decode_predictions: " + std::to_string(image_ids.size()) + " image ids for batch " +
                      std::to_string(batch));
  }
  const double size = static_cast<double>(raw.input_size);
  std::vector<std::vector<Detection>> result(static_cast<std::size_t>(batch));
  std::vector<torch::Tensor> levels;
  for (const auto& t : raw.levels) levels.push_back(t.detach().to(torch::kCPU, torch::kDouble).contiguous());

  for (std::int64_t b = 0; b < batch; ++b) {
    const std::string id = image_ids.empty() ? std::to_string(b) : image_ids[static_cast<std::size_t>(b)];
    std::vector<Detection> candidates;
    for (std::size_t l = 0; l < levels.size(); ++l) {
      const auto acc = levels[l].accessor<double, 4>();
      const double stride = static_cast<double>(raw.strides[l]);
      const std::int64_t channels = levels[l].size(1);
      for (std::int64_t i = 0; i < levels[l].size(2); ++i) {
        for (std::int64_t j = 0; j < levels[l].size(3); ++j) {
          int best = 0;
          double best_logit = acc[b][4][i][j];
          for (std::int64_t c = 5; c < channels; ++c) {
            if (acc[b][c][i][j] > best_logit) {
              best_logit = acc[b][c][i][j];
              best = static_cast<int>(c - 4);
            }
          }
          const double score = sigmoid(best_logit);
          if (score < options.conf_thresh) continue;
          const double d[4] = {acc[b][0][i][j], acc[b][1][i][j], acc[b][2][i][j], acc[b][3][i][j]};
          Box box = decode_box((j + 0.5) * stride, (i + 0.5) * stride, d, stride);
          box = {std::clamp(box.x1, 0.0, size), std::clamp(box.y1, 0.0, size), std::clamp(box.x2, 0.0, size),
                 std::clamp(box.y2, 0.0, size)};
          if (!box.valid()) continue;
          candidates.push_back({id, best, score, box});
        }
      }
    }
    result[static_cast<std::size_t>(b)] = class_wise_nms(std::move(candidates), options.nms_iou, options.max_det);
  }
  return result;
}

}  // namespace epanet::detector
