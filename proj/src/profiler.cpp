#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "epanet/detector.hpp"

namespace epanet::detector {

namespace {

std::int64_t flops_under(const std::vector<flops::LayerRecord>& layers, const std::string& prefix) {
  std::int64_t total = 0;
  for (const auto& r : layers) {
    if (r.section == prefix || r.section.starts_with(prefix + "/")) total += r.flops;
  }
  return total;
}

template <typename Fn>
double median_latency_ms(Fn&& run, const ProfileOptions& options) {
  if (!options.measure_latency || options.timed_runs <= 0) return std::numeric_limits<double>::quiet_NaN();
  for (int i = 0; i < options.warmup; ++i) run();
  std::vector<double> times;
  for (int i = 0; i < options.timed_runs; ++i) {
    const auto start = std::chrono::steady_clock::now();
    run();
    times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(times.begin(), times.end());
  const std::size_t n = times.size();
  return n % 2 == 1 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
}

void add_graph_details(ProfileReport& report, pyramid::FusionGraphImpl& graph, const std::string& prefix,
                       const std::string& name_prefix) {
  const auto& spec = graph.spec();
  for (std::size_t i = 0; i < spec.edges.size(); ++i) {
    const std::string& key = graph.edge_name(i);
    report.details.push_back({name_prefix + key, graph.edge_params(i), flops_under(report.layers, prefix + key)});
  }
  for (const auto& id : graph.execution_order()) {
    const std::string key = "node_" + id;
    report.details.push_back({name_prefix + key, graph.node_params(id), flops_under(report.layers, prefix + key)});
  }
}

}  // namespace

ProfileReport profile_model(DetectorImpl& model, const ProfileOptions& options) {
  torch::NoGradGuard no_grad;
  const bool was_training = model.is_training();
  model.eval();
  const auto dtype = model.parameters().front().scalar_type();
  const auto input = torch::zeros({1, 3, options.input_size, options.input_size}, torch::TensorOptions().dtype(dtype));

  ProfileReport report;
  report.params = blocks::count_params(model);
  {
    flops::Scope scope;
    model.forward(input);
    report.layers = scope.records();
    report.flops = scope.total();
  }
  for (const auto& child : model.named_children()) {
    report.modules.push_back(
        {child.key(), blocks::count_params(*child.value()), flops_under(report.layers, child.key())});
  }
  report.details.push_back({"backbone.stem", blocks::count_params(*model.backbone->stem),
                            flops_under(report.layers, "backbone/stem")});
  for (std::size_t i = 0; i < model.backbone->stages->size(); ++i) {
    const std::string key = "stages." + std::to_string(i);
    report.details.push_back({"backbone." + key, blocks::count_params(*model.backbone->stages[i]),
                              flops_under(report.layers, "backbone/" + key)});
  }
  add_graph_details(report, *model.neck, "neck/", "neck.");
  for (std::size_t i = 0; i < model.head->box_branches->size(); ++i) {
    const std::string key = "level." + std::to_string(i);
    report.details.push_back({"head." + key,
                              blocks::count_params(*model.head->box_branches[i]) +
                                  blocks::count_params(*model.head->cls_branches[i]),
                              flops_under(report.layers, "head/" + key)});
  }
  report.latency_ms = median_latency_ms([&] { model.forward(input); }, options);
  if (was_training) model.train();
  return report;
}

ProfileReport profile_graph(pyramid::FusionGraphImpl& graph, const std::map<int, std::int64_t>& backbone_widths,
                            const ProfileOptions& options) {
  torch::NoGradGuard no_grad;
  const bool was_training = graph.is_training();
  graph.eval();
  const auto dtype = graph.parameters().empty() ? torch::kFloat : graph.parameters().front().scalar_type();
  std::map<int, torch::Tensor> features;
  for (const auto& [level, width] : backbone_widths) {
    const std::int64_t side = options.input_size >> level;
    features[level] = torch::zeros({1, width, side, side}, torch::TensorOptions().dtype(dtype));
  }

  ProfileReport report;
  report.params = blocks::count_params(graph);
  {
    flops::Scope scope;
    graph.forward(features);
    report.layers = scope.records();
    report.flops = scope.total();
  }
  report.modules.push_back({"neck", report.params, report.flops});
  add_graph_details(report, graph, "", "");
  report.latency_ms = median_latency_ms([&] { graph.forward(features); }, options);
  if (was_training) graph.train();
  return report;
}

}  // namespace epanet::detector
