#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "epanet/blocks.hpp"

// Declarative feature-pyramid fusion graphs.
//
// A FusionGraphSpec lists nodes (backbone inputs and fusion nodes), typed
// edges between them and the ordered outputs. Each fusion node merges its
// incoming edge results (sum or concat + 1x1) and then applies an optional
// block. The same engine runs top-down FPN, fully-connected FPN, PANet,
// BiFPN connectivity and EPA-FPN; presets are plain data and can be loaded
// from JSON files.

namespace epanet::pyramid {

enum class Transform { lateral_1x1, up2, up4, down2, down4, identity };
enum class EdgeTag { baseline, green_longrange, blue_cross };
enum class Merge { sum, concat_then_1x1 };
enum class NodeBlock { none, conv3x3, c2f, msc2f };
enum class Preset { fpn, fully_connected, panet, bifpn, epa };

struct FusionNode {
  std::string id;
  int level = 3;               // resolution is input / 2^level
  bool input = false;          // bound to a backbone level; width comes from the backbone
  std::int64_t width = 0;      // channels of a fusion node
  Merge merge = Merge::sum;
  NodeBlock block = NodeBlock::none;
  std::int64_t depth = 1;      // bottlenecks inside c2f / msc2f blocks

  friend bool operator==(const FusionNode&, const FusionNode&) = default;
};

struct FusionEdge {
  std::string src;
  std::string dst;
  Transform transform = Transform::lateral_1x1;
  EdgeTag tag = EdgeTag::baseline;

  friend bool operator==(const FusionEdge&, const FusionEdge&) = default;
};

struct FusionGraphSpec {
  std::string name;
  int min_level = 3;
  int max_level = 5;
  std::vector<FusionNode> nodes;
  std::vector<FusionEdge> edges;
  std::vector<std::string> outputs;

  const FusionNode* find(std::string_view id) const;
  std::vector<const FusionEdge*> incoming(std::string_view id) const;

  friend bool operator==(const FusionGraphSpec&, const FusionGraphSpec&) = default;
};

/// Signed level change of a transform: src.level - dst.level.
int level_shift(Transform t);

std::string_view to_string(Transform t);
std::string_view to_string(EdgeTag t);
std::string_view to_string(Merge m);
std::string_view to_string(NodeBlock b);
std::string_view to_string(Preset p);
Transform parse_transform(std::string_view s);
EdgeTag parse_edge_tag(std::string_view s);
Merge parse_merge(std::string_view s);
NodeBlock parse_node_block(std::string_view s);
/// Throws ConfigError listing the valid presets.
Preset parse_preset(std::string_view s);
const std::vector<Preset>& all_presets();

/// Canonical topology for `preset` with every fusion node at `node_width`.
FusionGraphSpec preset_topology(Preset preset, std::int64_t node_width = 64);
FusionGraphSpec preset_topology(std::string_view name, std::int64_t node_width = 64);

/// Throws ConfigError on: duplicate ids, dangling edge endpoints, levels out
/// of range, transform/level mismatch, input nodes with incoming edges,
/// fusion nodes without inputs, cycles, unreachable or unknown outputs.
void validate(const FusionGraphSpec& spec);

/// Fusion nodes in execution order (dependencies first, ties by declaration).
std::vector<std::string> execution_order(const FusionGraphSpec& spec);

/// Returns a copy with every fusion node set to `width`.
FusionGraphSpec with_node_width(FusionGraphSpec spec, std::int64_t width);
/// Returns a copy with msc2f nodes turned into c2f (or c2f into msc2f).
FusionGraphSpec with_bottleneck(FusionGraphSpec spec, blocks::BottleneckKind kind);

// --- text format -------------------------------------------------------------
nlohmann::json to_json(const FusionGraphSpec& spec);
/// Parses and validates. Unknown keys are errors.
FusionGraphSpec spec_from_json(const nlohmann::json& j);
FusionGraphSpec load_spec(const std::string& path);
void save_spec(const FusionGraphSpec& spec, const std::string& path);

// --- executable graph ----------------------------------------------------------

/// One edge: resampling plus channel adaptation.
///   lateral_1x1: 1x1 conv (bias) to the destination width
///   upN:         1x1 conv (bias) when widths differ, then nearest upsampling
///   downN:       3x3 conv (bias), stride N, to the destination width
///   identity:    pass-through; keeps the source width
class FusionEdgeOpImpl : public torch::nn::Module {
 public:
  FusionEdgeOpImpl(Transform transform, std::int64_t in_width, std::int64_t out_width);
  torch::Tensor forward(const torch::Tensor& x);

  Transform transform() const { return transform_; }
  std::int64_t out_width() const { return out_width_; }

  torch::nn::Conv2d conv{nullptr};

 private:
  Transform transform_;
  std::int64_t out_width_;
};
TORCH_MODULE(FusionEdgeOp);

/// Merge + block of one fusion node.
class FusionNodeOpImpl : public torch::nn::Module {
 public:
  FusionNodeOpImpl(const FusionNode& node, const std::vector<std::int64_t>& incoming_widths);
  torch::Tensor forward(const std::vector<torch::Tensor>& inputs);

  const FusionNode& node() const { return node_; }

  torch::nn::Conv2d merge_conv{nullptr};  // concat_then_1x1 only
  torch::nn::Conv2d conv3x3{nullptr};
  blocks::C2f c2f{nullptr};

 private:
  FusionNode node_;
};
TORCH_MODULE(FusionNodeOp);

class FusionGraphImpl : public torch::nn::Module {
 public:
  /// `backbone_widths` maps level -> channels of the backbone feature.
  FusionGraphImpl(FusionGraphSpec spec, const std::map<int, std::int64_t>& backbone_widths);

  /// Outputs in the declared order.
  std::vector<torch::Tensor> forward(const std::map<int, torch::Tensor>& features);
  /// Every node's value (inputs included), keyed by node id.
  std::map<std::string, torch::Tensor> forward_all(const std::map<int, torch::Tensor>& features);

  const FusionGraphSpec& spec() const { return spec_; }
  const std::vector<std::string>& execution_order() const { return order_; }
  std::int64_t node_width(const std::string& id) const { return widths_.at(id); }
  std::vector<std::int64_t> output_widths() const;

  /// Learnable scalars of one edge / one node.
  std::int64_t edge_params(std::size_t edge_index) const;
  std::int64_t node_params(const std::string& id) const;

  FusionEdgeOp edge(std::size_t i) const { return edges_.at(i); }
  /// Module name of edge i: "edge_<src>_<dst>", suffixed "_<k>" for the k-th
  /// repeat of the same endpoint pair.
  const std::string& edge_name(std::size_t i) const { return edge_names_.at(i); }
  FusionNodeOp node(const std::string& id) const { return nodes_.at(id); }

 private:
  FusionGraphSpec spec_;
  std::vector<std::string> order_;
  std::map<std::string, std::int64_t> widths_;
  std::vector<FusionEdgeOp> edges_;
  std::vector<std::string> edge_names_;
  std::map<std::string, FusionNodeOp> nodes_;
};
TORCH_MODULE(FusionGraph);

/// Instantiates parameters for `spec`. Throws ConfigError on invalid specs,
/// missing backbone levels, or width mismatches at sum-merge nodes.
FusionGraph build_graph(const FusionGraphSpec& spec, const std::map<int, std::int64_t>& backbone_widths);

/// Exact learnable-scalar count (edges + nodes).
std::int64_t count_params(const FusionGraphImpl& graph);

}  // namespace epanet::pyramid
