#include "epanet/pyramid.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include "epanet/errors.hpp"
#include "epanet/flops.hpp"

namespace epanet::pyramid {

namespace nn = torch::nn;
using nlohmann::json;

// ---------------------------------------------------------------- enums

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::pair<std::string_view, E>, N>& table, const char* what) {
  for (const auto& [name, value] : table)
    if (name == s) return value;
  std::string valid;
  for (const auto& [name, value] : table) {
    if (!valid.empty()) valid += ", ";
    valid += name;
  }
  throw ConfigError("unknown " + std::string(what) + " '" + std::string(s) + "' (valid: " + valid + ")");
}

template <typename E, std::size_t N>
std::string_view enum_name(E v, const std::array<std::pair<std::string_view, E>, N>& table) {
  for (const auto& [name, value] : table)
    if (value == v) return name;
  return "?";
}

constexpr std::array<std::pair<std::string_view, Transform>, 6> kTransforms{{
    {"lateral_1x1", Transform::lateral_1x1},
    {"up2", Transform::up2},
    {"up4", Transform::up4},
    {"down2", Transform::down2},
    {"down4", Transform::down4},
    {"identity", Transform::identity},
}};
constexpr std::array<std::pair<std::string_view, EdgeTag>, 3> kTags{{
    {"baseline", EdgeTag::baseline},
    {"green_longrange", EdgeTag::green_longrange},
    {"blue_cross", EdgeTag::blue_cross},
}};
constexpr std::array<std::pair<std::string_view, Merge>, 2> kMerges{{
    {"sum", Merge::sum},
    {"concat_then_1x1", Merge::concat_then_1x1},
}};
constexpr std::array<std::pair<std::string_view, NodeBlock>, 4> kBlocks{{
    {"none", NodeBlock::none},
    {"conv3x3", NodeBlock::conv3x3},
    {"c2f", NodeBlock::c2f},
    {"msc2f", NodeBlock::msc2f},
}};
constexpr std::array<std::pair<std::string_view, Preset>, 5> kPresets{{
    {"fpn", Preset::fpn},
    {"fully_connected", Preset::fully_connected},
    {"panet", Preset::panet},
    {"bifpn", Preset::bifpn},
    {"epa", Preset::epa},
}};

}  // namespace

std::string_view to_string(Transform t) { return enum_name(t, kTransforms); }
std::string_view to_string(EdgeTag t) { return enum_name(t, kTags); }
std::string_view to_string(Merge m) { return enum_name(m, kMerges); }
std::string_view to_string(NodeBlock b) { return enum_name(b, kBlocks); }
std::string_view to_string(Preset p) { return enum_name(p, kPresets); }
Transform parse_transform(std::string_view s) { return parse_enum(s, kTransforms, "edge transform"); }
EdgeTag parse_edge_tag(std::string_view s) { return parse_enum(s, kTags, "edge tag"); }
Merge parse_merge(std::string_view s) { return parse_enum(s, kMerges, "merge rule"); }
NodeBlock parse_node_block(std::string_view s) { return parse_enum(s, kBlocks, "node block"); }
Preset parse_preset(std::string_view s) { return parse_enum(s, kPresets, "topology preset"); }

const std::vector<Preset>& all_presets() {
  static const std::vector<Preset> presets{Preset::fpn, Preset::fully_connected, Preset::panet, Preset::bifpn,
                                           Preset::epa};
  return presets;
}

int level_shift(Transform t) {
  switch (t) {
    case Transform::up2: return 1;
    case Transform::up4: return 2;
    case Transform::down2: return -1;
    case Transform::down4: return -2;
    case Transform::lateral_1x1:
    case Transform::identity: return 0;
  }
  return 0;
}

// ---------------------------------------------------------------- spec helpers

const FusionNode* FusionGraphSpec::find(std::string_view id) const {
  for (const auto& n : nodes)
    if (n.id == id) return &n;
  return nullptr;
}

std::vector<const FusionEdge*> FusionGraphSpec::incoming(std::string_view id) const {
  std::vector<const FusionEdge*> result;
  for (const auto& e : edges)
    if (e.dst == id) result.push_back(&e);
  return result;
}

namespace {

class SpecBuilder {
 public:
  SpecBuilder(std::string name, std::int64_t width) : width_(width) { spec_.name = std::move(name); }

  SpecBuilder& inputs() {
    for (int level = 3; level <= 5; ++level) {
      spec_.nodes.push_back({"C" + std::to_string(level), level, true, 0, Merge::sum, NodeBlock::none, 1});
    }
    return *this;
  }
  SpecBuilder& node(std::string id, int level, Merge merge, NodeBlock block) {
    spec_.nodes.push_back({std::move(id), level, false, width_, merge, block, 1});
    return *this;
  }
  SpecBuilder& edge(std::string src, std::string dst, Transform t, EdgeTag tag = EdgeTag::baseline) {
    spec_.edges.push_back({std::move(src), std::move(dst), t, tag});
    return *this;
  }
  FusionGraphSpec outputs(std::vector<std::string> ids) {
    spec_.outputs = std::move(ids);
    return spec_;
  }

 private:
  FusionGraphSpec spec_;
  std::int64_t width_;
};

// P5 = Conv3x3(Conv1x1(C5)); P_i = Conv3x3(Conv1x1(C_i) + up(P_{i+1})).
SpecBuilder& top_down(SpecBuilder& b) {
  return b.node("P5", 5, Merge::sum, NodeBlock::conv3x3)
      .edge("C5", "P5", Transform::lateral_1x1)
      .node("P4", 4, Merge::sum, NodeBlock::conv3x3)
      .edge("C4", "P4", Transform::lateral_1x1)
      .edge("P5", "P4", Transform::up2)
      .node("P3", 3, Merge::sum, NodeBlock::conv3x3)
      .edge("C3", "P3", Transform::lateral_1x1)
      .edge("P4", "P3", Transform::up2);
}

}  // namespace

FusionGraphSpec preset_topology(Preset preset, std::int64_t node_width) {
  if (node_width < 1) throw ConfigError("preset_topology: node width must be positive");
  SpecBuilder b(std::string(to_string(preset)), node_width);
  b.inputs();
  switch (preset) {
    case Preset::fpn:
      return top_down(b).outputs({"P3", "P4", "P5"});

    case Preset::fully_connected:
      // Every output level sums every backbone level.
      return b.node("P5", 5, Merge::sum, NodeBlock::conv3x3)
          .edge("C5", "P5", Transform::lateral_1x1)
          .edge("C4", "P5", Transform::down2)
          .edge("C3", "P5", Transform::down4)
          .node("P4", 4, Merge::sum, NodeBlock::conv3x3)
          .edge("C4", "P4", Transform::lateral_1x1)
          .edge("C5", "P4", Transform::up2)
          .edge("C3", "P4", Transform::down2)
          .node("P3", 3, Merge::sum, NodeBlock::conv3x3)
          .edge("C3", "P3", Transform::lateral_1x1)
          .edge("C4", "P3", Transform::up2)
          .edge("C5", "P3", Transform::up4)
          .outputs({"P3", "P4", "P5"});

    case Preset::panet:
      // Top-down FPN followed by an adjacent-level bottom-up path.
      return top_down(b)
          .node("N4", 4, Merge::sum, NodeBlock::conv3x3)
          .edge("P4", "N4", Transform::identity)
          .edge("P3", "N4", Transform::down2)
          .node("N5", 5, Merge::sum, NodeBlock::conv3x3)
          .edge("P5", "N5", Transform::identity)
          .edge("N4", "N5", Transform::down2)
          .outputs({"P3", "N4", "N5"});

    case Preset::bifpn:
      // BiFPN connectivity (unweighted): P5 is the projected input, the
      // middle level gets the two-path horizontal connection.
      return b.node("P5", 5, Merge::sum, NodeBlock::none)
          .edge("C5", "P5", Transform::lateral_1x1)
          .node("P4", 4, Merge::sum, NodeBlock::conv3x3)
          .edge("C4", "P4", Transform::lateral_1x1)
          .edge("P5", "P4", Transform::up2)
          .node("P3", 3, Merge::sum, NodeBlock::conv3x3)
          .edge("C3", "P3", Transform::lateral_1x1)
          .edge("P4", "P3", Transform::up2)
          .node("N4", 4, Merge::sum, NodeBlock::conv3x3)
          .edge("C4", "N4", Transform::lateral_1x1, EdgeTag::blue_cross)
          .edge("P4", "N4", Transform::identity)
          .edge("P3", "N4", Transform::down2)
          .node("N5", 5, Merge::sum, NodeBlock::conv3x3)
          .edge("P5", "N5", Transform::identity)
          .edge("N4", "N5", Transform::down2)
          .outputs({"P3", "N4", "N5"});

    case Preset::epa:
      // Top-down FPN, long-range C5 -> P3 and N3 -> N5, single-path C4 -> N4
      // cross connection, no bottom-up aggregation into the middle level.
      b.node("P5", 5, Merge::sum, NodeBlock::conv3x3)
          .edge("C5", "P5", Transform::lateral_1x1)
          .node("P4", 4, Merge::sum, NodeBlock::conv3x3)
          .edge("C4", "P4", Transform::lateral_1x1)
          .edge("P5", "P4", Transform::up2)
          .node("P3", 3, Merge::concat_then_1x1, NodeBlock::conv3x3)
          .edge("C3", "P3", Transform::lateral_1x1)
          .edge("P4", "P3", Transform::up2)
          .edge("C5", "P3", Transform::up4, EdgeTag::green_longrange)
          .node("N3", 3, Merge::sum, NodeBlock::msc2f)
          .edge("P3", "N3", Transform::identity)
          .node("N4", 4, Merge::concat_then_1x1, NodeBlock::c2f)
          .edge("P4", "N4", Transform::identity)
          .edge("C4", "N4", Transform::lateral_1x1, EdgeTag::blue_cross)
          .node("N5", 5, Merge::concat_then_1x1, NodeBlock::msc2f)
          .edge("P5", "N5", Transform::identity)
          .edge("N3", "N5", Transform::down4, EdgeTag::green_longrange);
      return b.outputs({"N3", "N4", "N5"});
  }
  throw ConfigError("preset_topology: unhandled preset");
}

FusionGraphSpec preset_topology(std::string_view name, std::int64_t node_width) {
  return preset_topology(parse_preset(name), node_width);
}

// ---------------------------------------------------------------- validation

std::vector<std::string> execution_order(const FusionGraphSpec& spec) {
  std::map<std::string, int> indegree;
  std::map<std::string, std::vector<std::string>> consumers;
  for (const auto& n : spec.nodes)
    if (!n.input) indegree[n.id] = 0;
  for (const auto& e : spec.edges) {
    const auto* src = spec.find(e.src);
    if (src == nullptr || spec.find(e.dst) == nullptr) continue;
    if (!src->input) {
      ++indegree[e.dst];
      consumers[e.src].push_back(e.dst);
    }
  }
  // Kahn's algorithm; among ready nodes the earliest declared runs first.
  std::vector<std::string> order;
  std::set<std::string> done;
  while (order.size() < indegree.size()) {
    const FusionNode* next = nullptr;
    for (const auto& n : spec.nodes) {
      if (!n.input && !done.count(n.id) && indegree[n.id] == 0) {
        next = &n;
        break;
      }
    }
    if (next == nullptr) {
      std::string stuck;
      for (const auto& [id, deg] : indegree)
        if (!done.count(id)) stuck += (stuck.empty() ? "" : ", ") + id;
      throw ConfigError("fusion graph '" + spec.name + "' has a cycle through: " + stuck);
    }
    order.push_back(next->id);
    done.insert(next->id);
    for (const auto& c : consumers[next->id]) --indegree[c];
  }
  return order;
}

void validate(const FusionGraphSpec& spec) {
  const std::string where = "fusion graph '" + spec.name + "': ";
  if (spec.min_level > spec.max_level) throw ConfigError(where + "min_level exceeds max_level");
  std::set<std::string> ids;
  for (const auto& n : spec.nodes) {
    if (n.id.empty()) throw ConfigError(where + "node with empty id");
    if (!ids.insert(n.id).second) throw ConfigError(where + "duplicate node id '" + n.id + "'");
    if (n.level < spec.min_level || n.level > spec.max_level) {
      throw ConfigError(where + "node '" + n.id + "' level " + std::to_string(n.level) + " outside [" +
                        std::to_string(spec.min_level) + ", " + std::to_string(spec.max_level) + "]");
    }
    if (!n.input && n.width < 1) throw ConfigError(where + "node '" + n.id + "' needs a positive width");
    if (!n.input && n.depth < 0) throw ConfigError(where + "node '" + n.id + "' has negative depth");
  }
  for (const auto& e : spec.edges) {
    const auto* src = spec.find(e.src);
    const auto* dst = spec.find(e.dst);
    if (src == nullptr || dst == nullptr) {
      throw ConfigError(where + "edge " + e.src + " -> " + e.dst + " references a missing node");
    }
    if (dst->input) throw ConfigError(where + "edge " + e.src + " -> " + e.dst + " targets a backbone input");
    const int shift = src->level - dst->level;
    if (shift != level_shift(e.transform)) {
      throw ConfigError(where + "edge " + e.src + " -> " + e.dst + " uses " + std::string(to_string(e.transform)) +
                        " across a level difference of " + std::to_string(shift));
    }
  }
  for (const auto& n : spec.nodes) {
    if (!n.input && spec.incoming(n.id).empty()) throw ConfigError(where + "node '" + n.id + "' has no inputs");
  }
  execution_order(spec);  // throws on cycles

  if (spec.outputs.empty()) throw ConfigError(where + "no outputs declared");
  // Reachability from backbone inputs.
  std::set<std::string> reached;
  for (const auto& n : spec.nodes)
    if (n.input) reached.insert(n.id);
  for (bool grew = true; grew;) {
    grew = false;
    for (const auto& e : spec.edges)
      if (reached.count(e.src) && reached.insert(e.dst).second) grew = true;
  }
  for (const auto& out : spec.outputs) {
    if (spec.find(out) == nullptr) throw ConfigError(where + "unknown output node '" + out + "'");
    if (!reached.count(out)) throw ConfigError(where + "output '" + out + "' is unreachable from the backbone");
  }
}

FusionGraphSpec with_node_width(FusionGraphSpec spec, std::int64_t width) {
  for (auto& n : spec.nodes)
    if (!n.input) n.width = width;
  return spec;
}

FusionGraphSpec with_bottleneck(FusionGraphSpec spec, blocks::BottleneckKind kind) {
  for (auto& n : spec.nodes) {
    if (kind == blocks::BottleneckKind::plain && n.block == NodeBlock::msc2f) n.block = NodeBlock::c2f;
    if (kind == blocks::BottleneckKind::msddsp && n.block == NodeBlock::c2f) n.block = NodeBlock::msc2f;
  }
  return spec;
}

// ---------------------------------------------------------------- JSON

namespace {

constexpr std::string_view kFormat = "epanet-topology";
constexpr int kFormatVersion = 1;

void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

}  // namespace

json to_json(const FusionGraphSpec& spec) {
  json j;
  j["format"] = kFormat;
  j["version"] = kFormatVersion;
  j["name"] = spec.name;
  j["levels"] = {spec.min_level, spec.max_level};
  j["nodes"] = json::array();
  for (const auto& n : spec.nodes) {
    json jn{{"id", n.id}, {"level", n.level}};
    if (n.input) {
      jn["input"] = true;
    } else {
      jn["width"] = n.width;
      jn["merge"] = to_string(n.merge);
      jn["block"] = to_string(n.block);
      jn["depth"] = n.depth;
    }
    j["nodes"].push_back(std::move(jn));
  }
  j["edges"] = json::array();
  for (const auto& e : spec.edges) {
    j["edges"].push_back(
        {{"src", e.src}, {"dst", e.dst}, {"transform", to_string(e.transform)}, {"tag", to_string(e.tag)}});
  }
  j["outputs"] = spec.outputs;
  return j;
}

FusionGraphSpec spec_from_json(const json& j) {
  try {
    reject_unknown_keys(j, {"format", "version", "name", "levels", "nodes", "edges", "outputs"}, "topology");
    if (j.at("format").get<std::string>() != kFormat) throw ConfigError("topology: unexpected format tag");
    if (j.at("version").get<int>() != kFormatVersion) {
      throw ConfigError("topology: unsupported version " + j.at("version").dump());
    }
    FusionGraphSpec spec;
    spec.name = j.value("name", std::string("custom"));
    if (j.contains("levels")) {
      spec.min_level = j.at("levels").at(0).get<int>();
      spec.max_level = j.at("levels").at(1).get<int>();
    }
    for (const auto& jn : j.at("nodes")) {
      reject_unknown_keys(jn, {"id", "level", "input", "width", "merge", "block", "depth"}, "topology node");
      FusionNode n;
      n.id = jn.at("id").get<std::string>();
      n.level = jn.at("level").get<int>();
      n.input = jn.value("input", false);
      if (!n.input) {
        n.width = jn.at("width").get<std::int64_t>();
        n.merge = parse_merge(jn.value("merge", std::string("sum")));
        n.block = parse_node_block(jn.value("block", std::string("none")));
        n.depth = jn.value("depth", std::int64_t{1});
      }
      spec.nodes.push_back(std::move(n));
    }
    for (const auto& je : j.at("edges")) {
      reject_unknown_keys(je, {"src", "dst", "transform", "tag"}, "topology edge");
      spec.edges.push_back({je.at("src").get<std::string>(), je.at("dst").get<std::string>(),
                            parse_transform(je.at("transform").get<std::string>()),
                            parse_edge_tag(je.value("tag", std::string("baseline")))});
    }
    spec.outputs = j.at("outputs").get<std::vector<std::string>>();
    validate(spec);
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("topology: malformed document: ") + e.what());
  }
}

FusionGraphSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open topology file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("topology file '" + path + "': " + e.what());
  }
  return spec_from_json(j);
}

void save_spec(const FusionGraphSpec& spec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write topology file '" + path + "'");
  out << to_json(spec).dump(2) << '\n';
}

// ---------------------------------------------------------------- modules

namespace {

std::int64_t scale_factor(Transform t) {
  switch (t) {
    case Transform::up2:
    case Transform::down2: return 2;
    case Transform::up4:
    case Transform::down4: return 4;
    default: return 1;
  }
}

}  // namespace

FusionEdgeOpImpl::FusionEdgeOpImpl(Transform transform, std::int64_t in_width, std::int64_t out_width)
    : transform_(transform), out_width_(out_width) {
  switch (transform) {
    case Transform::lateral_1x1:
      conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in_width, out_width, 1)));
      break;
    case Transform::up2:
    case Transform::up4:
      if (in_width != out_width) {
        conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in_width, out_width, 1)));
      }
      break;
    case Transform::down2:
    case Transform::down4:
      conv = register_module(
          "conv", nn::Conv2d(nn::Conv2dOptions(in_width, out_width, 3).stride(scale_factor(transform)).padding(1)));
      break;
    case Transform::identity:
      out_width_ = in_width;
      break;
  }
}

torch::Tensor FusionEdgeOpImpl::forward(const torch::Tensor& x) {
  switch (transform_) {
    case Transform::lateral_1x1:
    case Transform::down2:
    case Transform::down4:
      return flops::conv(conv, x);
    case Transform::up2:
    case Transform::up4: {
      auto y = conv ? flops::conv(conv, x) : x;
      const double f = static_cast<double>(scale_factor(transform_));
      return nn::functional::interpolate(
          y, nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{f, f}).mode(torch::kNearest));
    }
    case Transform::identity:
      return x;
  }
  return x;
}

FusionNodeOpImpl::FusionNodeOpImpl(const FusionNode& node, const std::vector<std::int64_t>& incoming_widths)
    : node_(node) {
  if (node.merge == Merge::sum) {
    for (auto w : incoming_widths) {
      if (w != node.width) {
        throw ConfigError("width mismatch at sum-merge node '" + node.id + "': incoming width " + std::to_string(w) +
                          " vs node width " + std::to_string(node.width));
      }
    }
  } else {
    std::int64_t total = 0;
    for (auto w : incoming_widths) total += w;
    merge_conv = register_module("merge", nn::Conv2d(nn::Conv2dOptions(total, node.width, 1)));
  }
  const blocks::BlockConfig cfg{node.width, node.width, 3, 1, 1, node.depth};
  switch (node.block) {
    case NodeBlock::none:
      break;
    case NodeBlock::conv3x3:
      conv3x3 = register_module("conv3x3", nn::Conv2d(nn::Conv2dOptions(node.width, node.width, 3).padding(1)));
      break;
    case NodeBlock::c2f:
      c2f = register_module("c2f", blocks::C2f(cfg, blocks::BottleneckKind::plain));
      break;
    case NodeBlock::msc2f:
      c2f = register_module("c2f", blocks::C2f(cfg, blocks::BottleneckKind::msddsp));
      break;
  }
}

torch::Tensor FusionNodeOpImpl::forward(const std::vector<torch::Tensor>& inputs) {
  torch::Tensor merged;
  if (node_.merge == Merge::sum) {
    merged = inputs.front();
    for (std::size_t i = 1; i < inputs.size(); ++i) merged = flops::elementwise("add", merged + inputs[i]);
  } else {
    merged = flops::conv(merge_conv, inputs.size() == 1 ? inputs.front() : torch::cat(inputs, 1));
  }
  if (conv3x3) return flops::conv(conv3x3, merged);
  if (c2f) return c2f->forward(merged);
  return merged;
}

FusionGraphImpl::FusionGraphImpl(FusionGraphSpec spec, const std::map<int, std::int64_t>& backbone_widths)
    : spec_(std::move(spec)) {
  validate(spec_);
  for (const auto& n : spec_.nodes) {
    if (!n.input) continue;
    auto it = backbone_widths.find(n.level);
    if (it == backbone_widths.end()) {
      throw ConfigError("fusion graph '" + spec_.name + "': backbone provides no level " + std::to_string(n.level) +
                        " for input node '" + n.id + "'");
    }
    widths_[n.id] = it->second;
  }
  order_ = pyramid::execution_order(spec_);
  for (const auto& n : spec_.nodes)
    if (!n.input) widths_[n.id] = n.width;

  std::map<std::string, int> repeats;
  for (std::size_t i = 0; i < spec_.edges.size(); ++i) {
    const auto& e = spec_.edges[i];
    std::string name = "edge_" + e.src + "_" + e.dst;
    if (const int k = repeats[name]++; k > 0) name += "_" + std::to_string(k);
    edges_.push_back(register_module(name, FusionEdgeOp(e.transform, widths_.at(e.src), widths_.at(e.dst))));
    edge_names_.push_back(std::move(name));
  }
  for (const auto& id : order_) {
    std::vector<std::int64_t> incoming;
    for (std::size_t i = 0; i < spec_.edges.size(); ++i)
      if (spec_.edges[i].dst == id) incoming.push_back(edges_[i]->out_width());
    nodes_.emplace(id, register_module("node_" + id, FusionNodeOp(*spec_.find(id), incoming)));
  }
}

std::map<std::string, torch::Tensor> FusionGraphImpl::forward_all(const std::map<int, torch::Tensor>& features) {
  std::map<std::string, torch::Tensor> values;
  // Reference resolution: input_size = H_level * 2^level must agree across inputs.
  std::int64_t ref_h = -1, ref_w = -1;
  for (const auto& n : spec_.nodes) {
    if (!n.input) continue;
    auto it = features.find(n.level);
    if (it == features.end()) {
      throw ConfigError("fusion graph '" + spec_.name + "': missing backbone feature for level " +
                        std::to_string(n.level));
    }
    const auto& f = it->second;
    blocks::require_channels(f, widths_.at(n.id), "fusion graph input");
    const std::int64_t h = f.size(2) << n.level;
    const std::int64_t w = f.size(3) << n.level;
    if (ref_h < 0) {
      ref_h = h;
      ref_w = w;
    } else if (h != ref_h || w != ref_w) {
      throw ConfigError("fusion graph '" + spec_.name + "': level " + std::to_string(n.level) +
                        " feature size is inconsistent with the other levels");
    }
    values[n.id] = f;
  }
  for (const auto& id : order_) {
    const auto& node = *spec_.find(id);
    const std::int64_t expect_h = ref_h >> node.level;
    const std::int64_t expect_w = ref_w >> node.level;
    std::vector<torch::Tensor> inputs;
    for (std::size_t i = 0; i < spec_.edges.size(); ++i) {
      const auto& e = spec_.edges[i];
      if (e.dst != id) continue;
      torch::Tensor y;
      {
        flops::Section section(edge_names_[i]);
        y = edges_[i]->forward(values.at(e.src));
      }
      if (y.size(2) != expect_h || y.size(3) != expect_w) {
        std::ostringstream msg;
        msg << "fusion graph '" << spec_.name << "': edge " << e.src << " -> " << e.dst << " produced " << y.size(2)
            << "x" << y.size(3) << ", expected " << expect_h << "x" << expect_w;
        throw ConfigError(msg.str());
      }
      inputs.push_back(std::move(y));
    }
    torch::Tensor y;
    {
      flops::Section section("node_" + id);
      y = nodes_.at(id)->forward(inputs);
    }
    blocks::require_finite(y, "fusion node '" + id + "'");
    values[id] = std::move(y);
  }
  return values;
}

std::vector<torch::Tensor> FusionGraphImpl::forward(const std::map<int, torch::Tensor>& features) {
  auto values = forward_all(features);
  std::vector<torch::Tensor> outputs;
  outputs.reserve(spec_.outputs.size());
  for (const auto& id : spec_.outputs) outputs.push_back(values.at(id));
  return outputs;
}

std::vector<std::int64_t> FusionGraphImpl::output_widths() const {
  std::vector<std::int64_t> widths;
  for (const auto& id : spec_.outputs) widths.push_back(widths_.at(id));
  return widths;
}

std::int64_t FusionGraphImpl::edge_params(std::size_t edge_index) const {
  return blocks::count_params(*edges_.at(edge_index));
}

std::int64_t FusionGraphImpl::node_params(const std::string& id) const {
  return blocks::count_params(*nodes_.at(id));
}

FusionGraph build_graph(const FusionGraphSpec& spec, const std::map<int, std::int64_t>& backbone_widths) {
  return FusionGraph(spec, backbone_widths);
}

std::int64_t count_params(const FusionGraphImpl& graph) { return blocks::count_params(graph); }

}  // namespace epanet::pyramid
