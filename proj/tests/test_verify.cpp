#include <cmath>

#include <gtest/gtest.h>

#include "epanet/blocks.hpp"
#include "epanet/errors.hpp"
#include "epanet/verify.hpp"
#include "support/torch_helpers.hpp"

using namespace epanet;
using namespace epanet::verify;

namespace {

torch::nn::Conv2d single_conv(std::int64_t channels, std::int64_t dilation) {
  torch::nn::Conv2d conv(torch::nn::Conv2dOptions(channels, channels, 3).padding(dilation).dilation(dilation));
  conv->to(torch::kDouble);
  return conv;
}

}  // namespace

// ---------------------------------------------------------------- gradcheck

TEST(Gradcheck, IdentityHasNoError) {
  const auto r = finite_diff_gradcheck([](const torch::Tensor& x) { return x.clone(); },
                                       torch::randn({1, 2, 3, 3}, torch::kDouble));
  EXPECT_LT(r.max_relative_error, 1e-10);
  EXPECT_EQ(r.coordinates, 18);
  EXPECT_TRUE(r.flagged.empty());
}

TEST(Gradcheck, SquareAtOneMatchesTwo) {
  const auto x = torch::ones({1}, torch::kDouble);
  const auto r = finite_diff_gradcheck([](const torch::Tensor& t) { return t * t; }, x);
  EXPECT_LT(r.max_relative_error, 1e-8);
}

TEST(Gradcheck, KinkIsFlagged) {
  const auto x = torch::tensor({0.0, 1.0}, torch::kDouble);
  const auto r = finite_diff_gradcheck([](const torch::Tensor& t) { return t.abs(); }, x);
  EXPECT_EQ(r.flagged, (std::vector<std::int64_t>{0}));
}

TEST(Gradcheck, RejectsSinglePrecisionAndBadEps) {
  auto op = [](const torch::Tensor& t) { return t; };
  EXPECT_THROW(finite_diff_gradcheck(op, torch::randn({2})), ConfigError);
  EXPECT_THROW(finite_diff_gradcheck(op, torch::randn({2}, torch::kDouble), 1e-2), ConfigError);
}

TEST(Gradcheck, EveryBlockPassesInDoublePrecision) {
  blocks::Cbs cbs(8, 8, 3);
  blocks::Bottleneck bottleneck(8);
  blocks::C2f c2f(blocks::BlockConfig{8, 8, 1, 1, 1, 1});
  blocks::MsDdsp msddsp(8);
  std::vector<std::pair<std::string, std::function<torch::Tensor(const torch::Tensor&)>>> ops{
      {"cbs", [&](const torch::Tensor& x) { return cbs(x); }},
      {"bottleneck", [&](const torch::Tensor& x) { return bottleneck(x); }},
      {"c2f", [&](const torch::Tensor& x) { return c2f(x); }},
      {"msddsp", [&](const torch::Tensor& x) { return msddsp(x); }}};
  std::uint64_t seed = 40;
  for (auto* m : std::initializer_list<torch::nn::Module*>{cbs.get(), bottleneck.get(), c2f.get(), msddsp.get()})
    testing_support::randomize(*m, seed++);
  for (const auto& [name, op] : ops) {
    torch::manual_seed(seed++);
    const auto r = finite_diff_gradcheck(op, torch::randn({1, 8, 6, 6}, torch::kDouble));
    EXPECT_LT(r.max_relative_error, 1e-4) << name;
  }
}

// ---------------------------------------------------------------- receptive field

TEST(ReceptiveField, SingleConvIsThreeByThree) {
  auto conv = single_conv(2, 1);
  const auto e = receptive_field_probe([&](const torch::Tensor& x) { return conv(x); }, 2, 21);
  EXPECT_EQ(e.height, 3);
  EXPECT_EQ(e.width, 3);
}

TEST(ReceptiveField, DilationFourIsNineByNine) {
  auto conv = single_conv(2, 4);
  const auto e = receptive_field_probe([&](const torch::Tensor& x) { return conv(x); }, 2, 21);
  EXPECT_EQ(e.height, 1 + (3 - 1) * 4);
  EXPECT_EQ(e.width, 9);
}

TEST(ReceptiveField, StagedDilatedBranchIsFifteenByFifteen) {
  blocks::MsDdsp m(8);
  m->to(torch::kDouble);
  m->eval();
  // Recurrence rf += (k - 1) * d over d = 1, 2, 4.
  std::int64_t rf = 1;
  for (std::int64_t d : {1, 2, 4}) rf += 2 * d;
  const auto e = receptive_field_probe([&](const torch::Tensor& x) { return m->dilated_branch(x); }, 2, 31);
  EXPECT_EQ(e.height, rf);
  EXPECT_EQ(e.width, 15);
}

TEST(ReceptiveField, DeadModuleIsNumericError) {
  EXPECT_THROW(receptive_field_probe([](const torch::Tensor& x) { return x * 0.0; }, 1, 9), NumericError);
}

// ---------------------------------------------------------------- adapters

TEST(Adapters, ArrayRoundTrip) {
  const auto t = torch::randn({1, 3, 4, 5}, torch::kDouble);
  EXPECT_TRUE(torch::equal(from_array(to_array(t)), t));
}

TEST(Adapters, ExtractParamsSkipsBatchCounter) {
  blocks::Cbs cbs(4, 4, 1);
  const auto params = extract_params(*cbs);
  EXPECT_TRUE(params.count("conv.weight"));
  EXPECT_TRUE(params.count("bn.running_var"));
  EXPECT_FALSE(params.count("bn.num_batches_tracked"));
}

// ---------------------------------------------------------------- topology report

TEST(TopologyReportTest, OrderingHoldsAtWidth64) {
  detector::ProfileOptions options;
  options.input_size = 128;
  options.measure_latency = false;
  const auto report = topology_report({pyramid::Preset::fpn, pyramid::Preset::bifpn, pyramid::Preset::panet,
                                       pyramid::Preset::epa},
                                      64, {{3, 64}, {4, 128}, {5, 256}}, options);
  ASSERT_EQ(report.rows.size(), 4u);
  EXPECT_TRUE(report.ok()) << format_table(report);
  EXPECT_GT(report.epa_panet_ratio, 0.0);
  EXPECT_LT(report.epa_panet_ratio, 1.0);
  const auto text = format_table(report);
  EXPECT_NE(text.find("0.70"), std::string::npos);
  EXPECT_NE(text.find("not asserted"), std::string::npos);
}

TEST(TopologyReportTest, SinglePresetGivesOneRow) {
  detector::ProfileOptions options;
  options.input_size = 64;
  options.measure_latency = false;
  const auto report = topology_report({pyramid::Preset::epa}, 64, {{3, 64}, {4, 128}, {5, 256}}, options);
  EXPECT_EQ(report.rows.size(), 1u);
  EXPECT_TRUE(report.ok());
  EXPECT_EQ(report.epa_panet_ratio, 0.0);
}

TEST(TopologyReportTest, ViolationNamesThePair) {
  const auto v = check_ordering({{"fpn", 10, 0, 0}, {"epa", 30, 0, 0}, {"panet", 20, 0, 0}});
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NE(v[0].find("epa"), std::string::npos);
  EXPECT_NE(v[0].find("panet"), std::string::npos);
  EXPECT_TRUE(check_ordering({{"fpn", 10, 0, 0}, {"epa", 20, 0, 0}, {"panet", 30, 0, 0}}).empty());
}

TEST(TopologyReportTest, JsonCarriesReferenceRatio) {
  TopologyReport report;
  report.rows = {{"epa", 1, 2, std::nan("")}};
  const auto j = to_json(report);
  EXPECT_TRUE(j["rows"][0]["latency_ms"].is_null());
  EXPECT_NEAR(j["reference_epa_panet_ratio"].get<double>(), 1.6 / 2.3, 1e-12);
}
