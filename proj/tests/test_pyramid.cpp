#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "epanet/errors.hpp"
#include "epanet/oracle.hpp"
#include "epanet/pyramid.hpp"
#include "epanet/verify.hpp"
#include "support/torch_helpers.hpp"

using namespace epanet;
using namespace epanet::pyramid;
namespace oracle = epanet::verify::oracle;

namespace {

const std::map<int, std::int64_t> kWidths{{3, 64}, {4, 128}, {5, 256}};

std::map<int, torch::Tensor> random_features(const std::map<int, std::int64_t>& widths, std::int64_t input,
                                             torch::ScalarType dtype = torch::kFloat) {
  std::map<int, torch::Tensor> features;
  for (const auto& [level, width] : widths) {
    const std::int64_t side = input >> level;
    features[level] = torch::randn({1, width, side, side}, dtype);
  }
  return features;
}

std::size_t count_tag(const FusionGraphSpec& spec, EdgeTag tag) {
  std::size_t n = 0;
  for (const auto& e : spec.edges) n += e.tag == tag ? 1 : 0;
  return n;
}

int level_of(const FusionGraphSpec& spec, const std::string& id) { return spec.find(id)->level; }

}  // namespace

// ---------------------------------------------------------------- presets

TEST(Presets, FpnIsTopDownWithSumAndConv3x3) {
  const auto spec = preset_topology(Preset::fpn);
  EXPECT_EQ(spec.outputs.size(), 3u);
  for (const auto& e : spec.edges) {
    EXPECT_TRUE(e.transform == Transform::lateral_1x1 || e.transform == Transform::up2) << e.src << "->" << e.dst;
    EXPECT_EQ(e.tag, EdgeTag::baseline);
  }
  for (const auto& n : spec.nodes) {
    if (n.input) continue;
    EXPECT_EQ(n.merge, Merge::sum);
    EXPECT_EQ(n.block, NodeBlock::conv3x3);
  }
}

TEST(Presets, EpaHasLongRangeAndSingleCrossEdges) {
  const auto spec = preset_topology(Preset::epa);
  bool long_range = false, cross = false;
  const std::set<std::string> outputs(spec.outputs.begin(), spec.outputs.end());
  for (const auto& e : spec.edges) {
    const int gap = std::abs(level_of(spec, e.src) - level_of(spec, e.dst));
    if (e.tag == EdgeTag::green_longrange && gap >= 2) long_range = true;
    if (e.tag == EdgeTag::blue_cross && spec.find(e.src)->input && outputs.count(e.dst) && gap == 0) cross = true;
  }
  EXPECT_TRUE(long_range);
  EXPECT_TRUE(cross);
  EXPECT_EQ(count_tag(spec, EdgeTag::blue_cross), 1u);
}

TEST(Presets, PanetNodesAndEdgesOutnumberEpaEdges) {
  const auto panet = preset_topology(Preset::panet, 64);
  const auto epa = preset_topology(Preset::epa, 64);
  EXPECT_GT(panet.nodes.size() + panet.edges.size(), epa.edges.size());
}

TEST(Presets, EpaPrunesMiddleBottomUpPath) {
  const auto spec = preset_topology(Preset::epa);
  for (const auto& e : spec.edges) {
    if (level_of(spec, e.dst) != 4) continue;
    EXPECT_GE(level_of(spec, e.src), 4) << "middle node fed bottom-up: " << e.src << "->" << e.dst;
  }
}

TEST(Presets, UnknownNameListsValidPresets) {
  try {
    parse_preset("nasfpn");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const char* name : {"fpn", "fully_connected", "panet", "bifpn", "epa"}) EXPECT_NE(msg.find(name), std::string::npos);
  }
}

TEST(Presets, EveryPresetValidatesAndBuilds) {
  for (auto p : all_presets()) {
    const auto spec = preset_topology(p, 32);
    EXPECT_NO_THROW(validate(spec)) << to_string(p);
    EXPECT_NO_THROW(build_graph(spec, kWidths)) << to_string(p);
  }
}

TEST(Presets, ShippedFilesMatchCode) {
  const std::filesystem::path dir = std::filesystem::path(EPANET_SOURCE_DIR) / "presets";
  for (auto p : all_presets()) {
    const auto path = dir / (std::string(to_string(p)) + ".json");
    ASSERT_TRUE(std::filesystem::exists(path)) << path;
    EXPECT_EQ(load_spec(path.string()), preset_topology(p, 64)) << path;
  }
}

// ---------------------------------------------------------------- validation

TEST(Validation, ScaleMismatchIsRejected) {
  auto spec = preset_topology(Preset::fpn);
  for (auto& e : spec.edges)
    if (e.src == "P5" && e.dst == "P4") e.dst = "P3";  // up2 across two levels
  EXPECT_THROW(validate(spec), ConfigError);
}

TEST(Validation, CycleIsRejected) {
  auto spec = preset_topology(Preset::panet);
  spec.edges.push_back({"N5", "P4", Transform::up2, EdgeTag::baseline});
  EXPECT_THROW(validate(spec), ConfigError);
}

TEST(Validation, DanglingEdgeIsRejected) {
  auto spec = preset_topology(Preset::fpn);
  spec.edges.push_back({"Q9", "P3", Transform::identity, EdgeTag::baseline});
  EXPECT_THROW(validate(spec), ConfigError);
}

TEST(Validation, SumMergeWidthMismatchIsRejected) {
  auto spec = preset_topology(Preset::panet, 64);
  // Identity edges carry the source width; widening P4 breaks the sum at N4.
  for (auto& n : spec.nodes)
    if (n.id == "P4") n.width = 32;
  EXPECT_THROW(build_graph(spec, kWidths), ConfigError);
}

TEST(Validation, MissingBackboneLevelIsRejected) {
  EXPECT_THROW(build_graph(preset_topology(Preset::fpn), {{3, 64}, {4, 128}}), ConfigError);
}

// ---------------------------------------------------------------- execution

TEST(Execution, FpnOrderIsTopDown) {
  auto graph = build_graph(preset_topology(Preset::fpn, 64), kWidths);
  EXPECT_EQ(graph->execution_order(), (std::vector<std::string>{"P5", "P4", "P3"}));
}

TEST(Execution, OutputsAtExpectedResolutions) {
  for (auto p : all_presets()) {
    auto graph = build_graph(preset_topology(p, 16), kWidths);
    graph->eval();
    torch::NoGradGuard no_grad;
    const auto out = graph->forward(random_features(kWidths, 640));
    ASSERT_EQ(out.size(), 3u);
    EXPECT_EQ(out[0].sizes(), (std::vector<std::int64_t>{1, 16, 80, 80})) << to_string(p);
    EXPECT_EQ(out[1].sizes(), (std::vector<std::int64_t>{1, 16, 40, 40})) << to_string(p);
    EXPECT_EQ(out[2].sizes(), (std::vector<std::int64_t>{1, 16, 20, 20})) << to_string(p);
  }
}

TEST(Execution, EveryEdgeScalesByItsDeclaredFactor) {
  auto graph = build_graph(preset_topology(Preset::epa, 16), kWidths);
  graph->eval();
  torch::NoGradGuard no_grad;
  const auto values = graph->forward_all(random_features(kWidths, 128));
  const auto& spec = graph->spec();
  for (std::size_t i = 0; i < spec.edges.size(); ++i) {
    const auto& e = spec.edges[i];
    const auto out = graph->edge(i)->forward(values.at(e.src));
    const double factor = std::pow(2.0, level_shift(e.transform));
    EXPECT_EQ(out.size(2), static_cast<std::int64_t>(values.at(e.src).size(2) * factor)) << e.src << "->" << e.dst;
    EXPECT_EQ(out.size(2), values.at(e.dst).size(2));
  }
}

TEST(Execution, ZeroFeaturesAndZeroBiasesGiveZeroOutputs) {
  auto graph = build_graph(preset_topology(Preset::fpn, 16), kWidths);
  {
    torch::NoGradGuard no_grad;
    for (auto& p : graph->named_parameters())
      if (p.key().ends_with("bias")) p.value().zero_();
  }
  graph->eval();
  torch::NoGradGuard no_grad;
  std::map<int, torch::Tensor> zeros;
  for (const auto& [level, f] : random_features(kWidths, 64)) zeros[level] = torch::zeros_like(f);
  for (const auto& out : graph->forward(zeros)) EXPECT_EQ(out.abs().max().item<float>(), 0.0f);
}

TEST(Execution, NonFiniteFeatureNamesTheNode) {
  auto graph = build_graph(preset_topology(Preset::fpn, 16), kWidths);
  auto features = random_features(kWidths, 64);
  features[5][0][0][0][0] = std::numeric_limits<float>::infinity();
  try {
    graph->forward(features);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("P5"), std::string::npos) << e.what();
  }
}

TEST(Execution, MissingLevelIsConfigError) {
  auto graph = build_graph(preset_topology(Preset::fpn, 16), kWidths);
  auto features = random_features(kWidths, 64);
  features.erase(4);
  EXPECT_THROW(graph->forward(features), ConfigError);
}

TEST(Execution, FpnMatchesStraightLineOracle) {
  const std::map<int, std::int64_t> widths{{3, 4}, {4, 6}, {5, 8}};
  auto graph = build_graph(preset_topology(Preset::fpn, 4), widths);
  testing_support::randomize(*graph, 21);
  const auto features = random_features(widths, 96, torch::kDouble);
  torch::NoGradGuard no_grad;
  const auto out = graph->forward(features);
  const auto expected = oracle::fpn(verify::to_array(features.at(3)), verify::to_array(features.at(4)),
                                    verify::to_array(features.at(5)), verify::fpn_params(*graph));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(testing_support::max_abs_diff(out[i], expected[i]), 1e-9);
}

// ---------------------------------------------------------------- parameters

TEST(Params, SingleLateralEdgeCountsWeightsAndBias) {
  FusionGraphSpec spec;
  spec.name = "one_edge";
  spec.nodes = {{"C3", 3, true, 0, Merge::sum, NodeBlock::none, 1}, {"P3", 3, false, 64, Merge::sum, NodeBlock::none, 1}};
  spec.edges = {{"C3", "P3", Transform::lateral_1x1, EdgeTag::baseline}};
  spec.outputs = {"P3"};
  spec.min_level = 3;
  spec.max_level = 3;
  auto graph = build_graph(spec, {{3, 64}});
  EXPECT_EQ(count_params(*graph), 64 * 64 + 64);
}

TEST(Params, ParallelEdgesAreAdditive) {
  auto make = [](int k) {
    FusionGraphSpec spec;
    spec.name = "parallel";
    spec.min_level = 3;
    spec.max_level = 3;
    spec.nodes = {{"C3", 3, true, 0, Merge::sum, NodeBlock::none, 1},
                  {"P3", 3, false, 32, Merge::sum, NodeBlock::conv3x3, 1}};
    for (int i = 0; i < k; ++i) spec.edges.push_back({"C3", "P3", Transform::lateral_1x1, EdgeTag::baseline});
    spec.outputs = {"P3"};
    return build_graph(spec, {{3, 48}});
  };
  auto one = make(1);
  const std::int64_t edge = one->edge_params(0);
  const std::int64_t node = one->node_params("P3");
  for (int k : {1, 2, 5}) EXPECT_EQ(count_params(*make(k)), k * edge + node);
}

TEST(Params, CountIsSumOfEdgesAndNodes) {
  for (auto p : all_presets()) {
    auto graph = build_graph(preset_topology(p, 64), kWidths);
    std::int64_t sum = 0;
    for (std::size_t i = 0; i < graph->spec().edges.size(); ++i) sum += graph->edge_params(i);
    for (const auto& n : graph->spec().nodes)
      if (!n.input) sum += graph->node_params(n.id);
    EXPECT_EQ(count_params(*graph), sum) << to_string(p);
    EXPECT_EQ(count_params(*graph), blocks::count_params(*graph)) << to_string(p);
  }
}

TEST(Params, EpaIsCheaperThanPanetAndDearerThanFpnAtWidth64) {
  const auto fpn = count_params(*build_graph(preset_topology(Preset::fpn, 64), kWidths));
  const auto epa = count_params(*build_graph(preset_topology(Preset::epa, 64), kWidths));
  const auto panet = count_params(*build_graph(preset_topology(Preset::panet, 64), kWidths));
  EXPECT_LT(fpn, epa);
  EXPECT_LT(epa, panet);
  EXPECT_LT(double(epa) / double(panet), 1.0);
}

// ---------------------------------------------------------------- text format

TEST(SpecFormat, RoundTripIsIdentical) {
  for (auto p : all_presets()) {
    const auto spec = preset_topology(p, 48);
    EXPECT_EQ(spec_from_json(to_json(spec)), spec) << to_string(p);
  }
}

TEST(SpecFormat, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "epanet_spec_roundtrip.json";
  const auto spec = preset_topology(Preset::bifpn, 40);
  save_spec(spec, path.string());
  EXPECT_EQ(load_spec(path.string()), spec);
  std::filesystem::remove(path);
}

TEST(SpecFormat, UnknownKeyIsError) {
  auto j = to_json(preset_topology(Preset::fpn));
  j["colour"] = "green";
  EXPECT_THROW(spec_from_json(j), ConfigError);
}

TEST(SpecFormat, WidthAndBottleneckRewrites) {
  const auto spec = with_bottleneck(with_node_width(preset_topology(Preset::epa, 64), 32), blocks::BottleneckKind::plain);
  for (const auto& n : spec.nodes) {
    if (n.input) continue;
    EXPECT_EQ(n.width, 32);
    EXPECT_NE(n.block, NodeBlock::msc2f);
  }
}
