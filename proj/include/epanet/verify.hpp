#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "epanet/detector.hpp"
#include "epanet/oracle.hpp"
#include "epanet/pyramid.hpp"

// Numerical checks around the production modules: finite differences,
// receptive-field probing, oracle adapters and topology cost reports.

namespace epanet::verify {

using Function = std::function<torch::Tensor(const torch::Tensor&)>;

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::int64_t coordinates = 0;
  /// Flat input indices whose forward and backward secants disagree
  /// (non-differentiable points).
  std::vector<std::int64_t> flagged;
};

/// Central differences of the scalar readout sum(op(x) * w), w fixed and
/// random, against the autograd gradient. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-8). Requires a double input and eps in
/// [1e-6, 1e-4].
GradcheckResult finite_diff_gradcheck(const Function& op, const torch::Tensor& input, double eps = 1e-5);

struct Extent {
  std::int64_t height = 0;
  std::int64_t width = 0;
};

/// Bounding box of the non-zero input gradient of the centre output pixel
/// (summed over channels). Throws NumericError when the gradient is all zero.
Extent receptive_field_probe(const Function& module, std::int64_t channels, std::int64_t input_size);

// --- oracle adapters ---------------------------------------------------------------

oracle::Array to_array(const torch::Tensor& t);
torch::Tensor from_array(const oracle::Array& a);

/// Parameters and normalization buffers of `module` keyed by their dotted names.
oracle::ParamMap extract_params(const torch::nn::Module& module);

/// Parameters of an fpn-preset graph renamed to lateral{3,4,5} / smooth{3,4,5}.
oracle::ParamMap fpn_params(const pyramid::FusionGraphImpl& graph);

// --- topology report ------------------------------------------------------------------

struct TopologyRow {
  std::string name;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  double latency_ms = 0.0;
};

struct TopologyReport {
  std::int64_t node_width = 0;
  std::int64_t input_size = 0;
  std::vector<TopologyRow> rows;
  std::vector<std::string> violations;  // empty when the ordering holds
  double epa_panet_ratio = 0.0;         // 0 when either preset is absent
  bool ok() const { return violations.empty(); }
};

/// Expected ordering at matched widths: fpn <= bifpn <= epa < panet.
/// Pairs are checked between consecutive presets of that chain that are present.
std::vector<std::string> check_ordering(const std::vector<TopologyRow>& rows);

TopologyReport topology_report(const std::vector<pyramid::Preset>& presets, std::int64_t node_width = 64,
                               const std::map<int, std::int64_t>& backbone_widths = {{3, 64}, {4, 128}, {5, 256}},
                               const detector::ProfileOptions& options = {});

std::string format_table(const TopologyReport& report);
nlohmann::json to_json(const TopologyReport& report);

}  // namespace epanet::verify
