#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "epanet/metrics.hpp"
#include "support/reference_metrics.hpp"

using namespace epanet;
using metrics::Interpolation;

namespace {

GroundTruthBox gt(int cls, Box b, std::string image = "a") { return {cls, b, std::move(image)}; }
Detection det(int cls, double score, Box b, std::string image = "a") { return {std::move(image), cls, score, b}; }

}  // namespace

TEST(Iou, IdenticalBoxesGiveOne) { EXPECT_DOUBLE_EQ(metrics::iou({0, 0, 10, 10}, {0, 0, 10, 10}), 1.0); }

TEST(Iou, DisjointBoxesGiveZero) { EXPECT_DOUBLE_EQ(metrics::iou({0, 0, 10, 10}, {20, 20, 30, 30}), 0.0); }

TEST(Iou, HalfShiftedBoxesGiveOneThird) {
  EXPECT_NEAR(metrics::iou({0, 0, 10, 10}, {5, 0, 15, 10}), 50.0 / 150.0, 1e-15);
}

TEST(Iou, DegenerateBoxThrows) {
  EXPECT_THROW(metrics::iou({0, 0, 0, 10}, {0, 0, 10, 10}), std::invalid_argument);
  EXPECT_THROW(metrics::iou({0, 0, 10, 10}, {5, 5, 4, 8}), std::invalid_argument);
}

TEST(Iou, MatchesReferenceOnRandomBoxes) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Box a = reference::random_box(rng), b = reference::random_box(rng);
    EXPECT_NEAR(metrics::iou(a, b), reference::iou(a, b), 1e-12);
  }
}

TEST(Matching, ExactDetectionIsTruePositive) {
  const auto flags = metrics::match_detections({det(0, 0.9, {0, 0, 10, 10})}, {gt(0, {0, 0, 10, 10})}, 0.5);
  ASSERT_EQ(flags.size(), 1u);
  EXPECT_TRUE(flags[0]);
}

TEST(Matching, GroundTruthIsMatchedOnceByHigherScore) {
  // Lower score listed first: sorting happens inside.
  const auto flags = metrics::match_detections({det(0, 0.3, {0, 0, 10, 10}), det(0, 0.8, {1, 0, 11, 10})},
                                               {gt(0, {0, 0, 10, 10})}, 0.5);
  EXPECT_FALSE(flags[0]);
  EXPECT_TRUE(flags[1]);
}

TEST(Matching, ClassMustAgree) {
  const auto flags = metrics::match_detections({det(1, 0.9, {0, 0, 10, 10})}, {gt(0, {0, 0, 10, 10})}, 0.5);
  EXPECT_FALSE(flags[0]);
}

TEST(Matching, AgreesWithExhaustiveReferenceOnRandomInstances) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    auto inst = reference::random_instance(rng, 1, 10, 20, 3);
    for (double thr : {0.3, 0.5, 0.75}) {
      EXPECT_EQ(metrics::match_detections(inst.dets, inst.gts, thr), reference::match(inst.dets, inst.gts, thr))
          << "trial " << trial << " thr " << thr;
    }
  }
}

TEST(AveragePrecision, AllTruePositivesGiveOne) {
  for (auto mode : {Interpolation::coco101, Interpolation::all_points, Interpolation::voc11}) {
    EXPECT_DOUBLE_EQ(metrics::average_precision({true, true, true}, 3, mode).value, 1.0);
  }
}

TEST(AveragePrecision, NoDetectionsGiveZero) { EXPECT_DOUBLE_EQ(metrics::average_precision({}, 4).value, 0.0); }

TEST(AveragePrecision, NoGroundTruthCases) {
  const auto with_dets = metrics::average_precision({false, false}, 0);
  EXPECT_DOUBLE_EQ(with_dets.value, 0.0);
  EXPECT_TRUE(with_dets.defined);
  const auto empty = metrics::average_precision({}, 0);
  EXPECT_DOUBLE_EQ(empty.value, 1.0);
  EXPECT_FALSE(empty.defined);
}

TEST(AveragePrecision, TpFpTpMatchesLiteralDefinition) {
  const std::vector<bool> flags{true, false, true};
  // Envelope is 1 up to recall 0.5 (51 sample points), 2/3 above (50 points).
  const double hand = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
  EXPECT_NEAR(metrics::average_precision(flags, 2).value, reference::ap101(flags, 2), 1e-15);
  EXPECT_NEAR(metrics::average_precision(flags, 2).value, hand, 1e-15);
}

TEST(AveragePrecision, AgreesWithLiteralDefinitionOnRandomFlags) {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution coin(0.6);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = std::uniform_int_distribution<int>(0, 40)(rng);
    std::vector<bool> flags;
    for (int i = 0; i < n; ++i) flags.push_back(coin(rng));
    const auto tp = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
    const std::size_t n_gt = tp + std::uniform_int_distribution<std::size_t>(0, 5)(rng);
    if (n_gt == 0) continue;
    EXPECT_NEAR(metrics::average_precision(flags, n_gt).value, reference::ap101(flags, n_gt), 1e-12);
  }
}

TEST(AveragePrecision, AllPointsAndElevenPointModes) {
  const std::vector<bool> flags{true, false, true};
  // All-points area: 0.5 * 1 + 0.5 * 2/3.
  EXPECT_NEAR(metrics::average_precision(flags, 2, Interpolation::all_points).value, 0.5 + 1.0 / 3.0, 1e-15);
  // Eleven points: r = 0..0.5 (6 points) at 1, r = 0.6..1 (5 points) at 2/3.
  EXPECT_NEAR(metrics::average_precision(flags, 2, Interpolation::voc11).value, (6.0 + 5.0 * 2.0 / 3.0) / 11.0, 1e-15);
  EXPECT_EQ(metrics::parse_interpolation("voc11"), Interpolation::voc11);
  EXPECT_THROW(metrics::parse_interpolation("12pt"), std::invalid_argument);
}

TEST(AveragePrecision, LowerScoredFalsePositiveNeverIncreasesAp) {
  std::mt19937_64 rng(9);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<bool> flags;
    for (int i = 0; i < 15; ++i) flags.push_back(coin(rng));
    const auto n_gt = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true)) + 2;
    const double before = metrics::average_precision(flags, n_gt).value;
    flags.push_back(false);
    EXPECT_LE(metrics::average_precision(flags, n_gt).value, before + 1e-15);
  }
}

TEST(Evaluate, PerfectPredictionsGiveAllOnes) {
  std::vector<GroundTruthBox> gts{gt(0, {0, 0, 10, 10}, "a"), gt(1, {20, 20, 40, 50}, "a"), gt(0, {5, 5, 25, 25}, "b")};
  std::vector<Detection> dets;
  for (const auto& g : gts) dets.push_back(det(g.class_id, 0.9, g.box, g.image_id));
  const auto r = metrics::evaluate(dets, gts, {"a", "b"});
  EXPECT_DOUBLE_EQ(r.precision, 1.0);
  EXPECT_DOUBLE_EQ(r.recall, 1.0);
  EXPECT_DOUBLE_EQ(r.f1, 1.0);
  EXPECT_DOUBLE_EQ(r.map50, 1.0);
  EXPECT_DOUBLE_EQ(r.map50_95, 1.0);
}

TEST(Evaluate, EmptyPredictionsGiveZeroRecallAndMap) {
  const auto r = metrics::evaluate({}, {gt(0, {0, 0, 10, 10})}, {"a"});
  EXPECT_DOUBLE_EQ(r.recall, 0.0);
  EXPECT_DOUBLE_EQ(r.map50, 0.0);
  EXPECT_DOUBLE_EQ(r.map50_95, 0.0);
  EXPECT_DOUBLE_EQ(r.f1, 0.0);
}

TEST(Evaluate, UnknownImageIdThrows) {
  EXPECT_THROW(metrics::evaluate({det(0, 0.9, {0, 0, 10, 10}, "zzz")}, {gt(0, {0, 0, 10, 10}, "a")}, {"a"}),
               std::invalid_argument);
}

TEST(Evaluate, ClassWithOnlyFalsePositivesCountsAsZero) {
  const auto r = metrics::evaluate({det(0, 0.9, {0, 0, 10, 10}), det(2, 0.8, {50, 50, 60, 60})},
                                   {gt(0, {0, 0, 10, 10})}, {"a"});
  EXPECT_NEAR(r.map50, 0.5, 1e-15);
}

TEST(Evaluate, MatchesComposedReferenceOnRandomInstances) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const auto inst = reference::random_instance(rng, 50, 4, 6, 3);
    const auto r = metrics::evaluate(inst.dets, inst.gts, inst.images);
    const auto ref = reference::evaluate(inst.dets, inst.gts, inst.images, 0.25);
    EXPECT_NEAR(r.precision, ref.precision, 1e-9);
    EXPECT_NEAR(r.recall, ref.recall, 1e-9);
    EXPECT_NEAR(r.f1, ref.f1, 1e-9);
    EXPECT_NEAR(r.map50, ref.map50, 1e-9);
    EXPECT_NEAR(r.map50_95, ref.map50_95, 1e-9);
    int t = 0;
    for (const auto& [thr, ap] : r.ap_per_iou) EXPECT_NEAR(ap, ref.ap_by_threshold_index.at(t++), 1e-9);
  }
}

TEST(Evaluate, MapIsMeanOfPerThresholdAps) {
  std::mt19937_64 rng(4);
  const auto inst = reference::random_instance(rng, 10, 5, 8, 2);
  const auto r = metrics::evaluate(inst.dets, inst.gts, inst.images);
  ASSERT_EQ(r.ap_per_iou.size(), 10u);
  double sum = 0;
  for (const auto& [thr, ap] : r.ap_per_iou) {
    sum += ap;
    EXPECT_GE(ap, 0.0);
    EXPECT_LE(ap, 1.0);
  }
  EXPECT_NEAR(r.map50_95, sum / 10.0, 1e-12);
}

TEST(Evaluate, ApIsInvariantToPositiveScoreRescaling) {
  std::mt19937_64 rng(8);
  auto inst = reference::random_instance(rng, 10, 5, 8, 2);
  const auto before = metrics::evaluate(inst.dets, inst.gts, inst.images, {0.0, 0.5, Interpolation::coco101});
  for (auto& d : inst.dets) d.score *= 0.37;
  const auto after = metrics::evaluate(inst.dets, inst.gts, inst.images, {0.0, 0.5, Interpolation::coco101});
  EXPECT_DOUBLE_EQ(before.map50, after.map50);
  EXPECT_DOUBLE_EQ(before.map50_95, after.map50_95);
}

TEST(Evaluate, ReportSerializes) {
  const auto r = metrics::evaluate({det(0, 0.9, {0, 0, 10, 10})}, {gt(0, {0, 0, 10, 10})}, {"a"});
  const auto j = metrics::to_json(r);
  EXPECT_DOUBLE_EQ(j.at("map50").get<double>(), 1.0);
  EXPECT_TRUE(j.at("ap_per_iou").contains("0.95"));
  EXPECT_NE(metrics::format_report(r).find("mAP50-95"), std::string::npos);
}

TEST(DetectionsExport, JsonLinesRoundTrip) {
  const std::vector<Detection> dets{det(0, 0.75, {1.5, 2, 11.5, 22}, "x"), det(3, 0.25, {0, 0, 4, 4}, "y")};
  std::stringstream buf;
  metrics::write_detections_jsonl(buf, dets);
  const auto back = metrics::read_detections_jsonl(buf);
  ASSERT_EQ(back.size(), dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    EXPECT_EQ(back[i].image_id, dets[i].image_id);
    EXPECT_EQ(back[i].class_id, dets[i].class_id);
    EXPECT_DOUBLE_EQ(back[i].score, dets[i].score);
    EXPECT_EQ(back[i].box, dets[i].box);
  }
}
