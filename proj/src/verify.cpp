#include "epanet/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "epanet/errors.hpp"

namespace epanet::verify {

// ---------------------------------------------------------------- gradcheck

GradcheckResult finite_diff_gradcheck(const Function& op, const torch::Tensor& input, double eps) {
  if (input.scalar_type() != torch::kDouble) throw ConfigError("gradcheck: input must be double precision");
  if (eps < 1e-6 || eps > 1e-4) throw ConfigError("gradcheck: eps must lie in [1e-6, 1e-4]");

  auto x = input.detach().clone().contiguous();
  torch::Tensor weights;
  torch::Tensor analytic;
  {
    auto xg = x.clone().requires_grad_(true);
    const auto y = op(xg);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(1234);
    weights = at::randn(y.sizes(), gen, torch::TensorOptions().dtype(torch::kDouble));
    (y * weights).sum().backward();
    analytic = xg.grad().detach().contiguous();
  }

  torch::NoGradGuard no_grad;
  const auto base = op(x);
  GradcheckResult result;
  result.coordinates = x.numel();
  auto flat = x.view({-1});
  const auto* grad = analytic.data_ptr<double>();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double original = flat[i].item<double>();
    flat[i] = original + eps;
    const auto plus = op(x);
    flat[i] = original - eps;
    const auto minus = op(x);
    flat[i] = original;
    // Differences are taken elementwise before the readout to keep precision.
    const double numeric = ((plus - minus) * weights).sum().item<double>() / (2.0 * eps);
    const double forward = ((plus - base) * weights).sum().item<double>() / eps;
    const double backward = ((base - minus) * weights).sum().item<double>() / eps;
    if (std::abs(forward - backward) > 1e-3 * std::max(1.0, std::abs(numeric))) result.flagged.push_back(i);
    const double a = grad[i];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    result.max_relative_error = std::max(result.max_relative_error, rel);
  }
  return result;
}

Extent receptive_field_probe(const Function& module, std::int64_t channels, std::int64_t input_size) {
  auto x = torch::randn({1, channels, input_size, input_size}, torch::kDouble).requires_grad_(true);
  const auto y = module(x);
  const std::int64_t ch = y.size(2) / 2, cw = y.size(3) / 2;
  y.index({0, torch::indexing::Slice(), ch, cw}).sum().backward();
  const auto support = x.grad().abs().sum({0, 1}) > 0;  // H x W
  const auto nz = support.nonzero();
  if (nz.size(0) == 0) throw NumericError("receptive field probe: gradient is all zero (dead module)");
  const auto rows = nz.select(1, 0), cols = nz.select(1, 1);
  return {rows.max().item<std::int64_t>() - rows.min().item<std::int64_t>() + 1,
          cols.max().item<std::int64_t>() - cols.min().item<std::int64_t>() + 1};
}

// ---------------------------------------------------------------- adapters

oracle::Array to_array(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kCPU, torch::kDouble).contiguous();
  oracle::Array a;
  a.shape.assign(c.sizes().begin(), c.sizes().end());
  a.data.resize(static_cast<std::size_t>(c.numel()));
  if (c.numel() > 0) std::memcpy(a.data.data(), c.data_ptr<double>(), a.data.size() * sizeof(double));
  return a;
}

torch::Tensor from_array(const oracle::Array& a) {
  auto t = torch::empty(a.shape, torch::kDouble);
  if (!a.data.empty()) std::memcpy(t.data_ptr<double>(), a.data.data(), a.data.size() * sizeof(double));
  return t;
}

oracle::ParamMap extract_params(const torch::nn::Module& module) {
  oracle::ParamMap params;
  for (const auto& p : module.named_parameters()) params[p.key()] = to_array(p.value());
  for (const auto& b : module.named_buffers()) {
    if (b.key().ends_with("num_batches_tracked")) continue;
    params[b.key()] = to_array(b.value());
  }
  return params;
}

oracle::ParamMap fpn_params(const pyramid::FusionGraphImpl& graph) {
  const auto all = extract_params(graph);
  oracle::ParamMap out;
  for (int level : {3, 4, 5}) {
    const std::string l = std::to_string(level);
    for (const char* field : {"weight", "bias"}) {
      out["lateral" + l + "." + field] = oracle::param(all, "edge_C" + l + "_P" + l + ".conv." + field);
      out["smooth" + l + "." + field] = oracle::param(all, "node_P" + l + ".conv3x3." + field);
    }
  }
  return out;
}

// ---------------------------------------------------------------- topology report

std::vector<std::string> check_ordering(const std::vector<TopologyRow>& rows) {
  struct Link {
    const char* name;
    bool strict_after;  // relation to the next preset in the chain
  };
  static const Link chain[] = {{"fpn", false}, {"bifpn", false}, {"epa", true}, {"panet", false}};
  std::vector<std::string> violations;
  const TopologyRow* prev = nullptr;
  bool strict = false;
  for (const auto& link : chain) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const TopologyRow& r) { return r.name == link.name; });
    if (it == rows.end()) continue;
    if (prev != nullptr) {
      const bool holds = strict ? prev->params < it->params : prev->params <= it->params;
      if (!holds) {
        violations.push_back("params(" + prev->name + ") = " + std::to_string(prev->params) + (strict ? " < " : " <= ") +
                             "params(" + it->name + ") = " + std::to_string(it->params) + " is violated");
      }
    }
    prev = &*it;
    strict = link.strict_after;
  }
  return violations;
}

TopologyReport topology_report(const std::vector<pyramid::Preset>& presets, std::int64_t node_width,
                               const std::map<int, std::int64_t>& backbone_widths,
                               const detector::ProfileOptions& options) {
  TopologyReport report;
  report.node_width = node_width;
  report.input_size = options.input_size;
  for (auto preset : presets) {
    torch::manual_seed(0);
    auto graph = pyramid::build_graph(pyramid::preset_topology(preset, node_width), backbone_widths);
    const auto profile = detector::profile_graph(*graph, backbone_widths, options);
    report.rows.push_back({std::string(pyramid::to_string(preset)), profile.params, profile.flops, profile.latency_ms});
  }
  report.violations = check_ordering(report.rows);
  const TopologyRow* epa = nullptr;
  const TopologyRow* panet = nullptr;
  for (const auto& r : report.rows) {
    if (r.name == "epa") epa = &r;
    if (r.name == "panet") panet = &r;
  }
  if (epa && panet && panet->params > 0) report.epa_panet_ratio = double(epa->params) / double(panet->params);
  return report;
}

std::string format_table(const TopologyReport& report) {
  std::ostringstream out;
  out << "fusion topologies at node width " << report.node_width << ", input " << report.input_size << "\n";
  out << std::left << std::setw(18) << "preset" << std::right << std::setw(12) << "params" << std::setw(16)
      << "FLOPs" << std::setw(14) << "latency_ms" << "\n";
  for (const auto& r : report.rows) {
    out << std::left << std::setw(18) << r.name << std::right << std::setw(12) << r.params << std::setw(16) << r.flops
        << std::setw(14) << std::fixed << std::setprecision(3) << r.latency_ms << "\n";
  }
  if (report.epa_panet_ratio > 0) {
    out << "epa/panet params ratio " << std::setprecision(3) << report.epa_panet_ratio
        << " (reference ratio 0.70; informational, not asserted)\n";
  }
  if (report.ok()) {
    out << "ordering fpn <= bifpn <= epa < panet: holds\n";
  } else {
    for (const auto& v : report.violations) out << "ORDERING VIOLATION: " << v << "\n";
  }
  return out.str();
}

nlohmann::json to_json(const TopologyReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"name", r.name},
                    {"params", r.params},
                    {"flops", r.flops},
                    {"latency_ms", std::isnan(r.latency_ms) ? nlohmann::json(nullptr) : nlohmann::json(r.latency_ms)}});
  }
  return {{"node_width", report.node_width},
          {"input_size", report.input_size},
          {"rows", rows},
          {"ordering_holds", report.ok()},
          {"violations", report.violations},
          {"epa_panet_ratio", report.epa_panet_ratio},
          {"reference_epa_panet_ratio", 1.6 / 2.3}};
}

}  // namespace epanet::verify
