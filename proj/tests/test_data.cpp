#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>
#include <opencv2/imgcodecs.hpp>

#include "epanet/data.hpp"
#include "epanet/errors.hpp"

using namespace epanet;
using namespace epanet::data;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

bool same_image(const cv::Mat& a, const cv::Mat& b) {
  return a.size() == b.size() && a.type() == b.type() && cv::norm(a, b, cv::NORM_INF) == 0.0;
}

}  // namespace

// ---------------------------------------------------------------- labels

TEST(YoloLabels, CentreFormatBecomesPixelCorners) {
  std::istringstream in("0 0.5 0.5 0.5 0.5\n");
  std::size_t skipped = 0;
  const auto boxes = parse_yolo_labels(in, 100, 100, "img", skipped);
  ASSERT_EQ(boxes.size(), 1u);
  EXPECT_EQ(boxes[0].class_id, 0);
  EXPECT_EQ(boxes[0].box, (Box{25, 25, 75, 75}));
  EXPECT_EQ(boxes[0].image_id, "img");
  EXPECT_EQ(skipped, 0u);
}

TEST(YoloLabels, EmptyFileGivesNoBoxes) {
  std::istringstream in("");
  std::size_t skipped = 0;
  EXPECT_TRUE(parse_yolo_labels(in, 64, 64, "e", skipped).empty());
  EXPECT_EQ(skipped, 0u);
}

TEST(YoloLabels, ZeroSizeAndMalformedLinesAreSkippedAndCounted) {
  std::istringstream in("0 0.5 0.5 0 0\nbanana\n1 0.2 0.2 0.1\n2 0.5 0.5 0.2 0.2\n-1 0.5 0.5 0.2 0.2\n");
  std::size_t skipped = 0;
  const auto boxes = parse_yolo_labels(in, 50, 50, "m", skipped);
  ASSERT_EQ(boxes.size(), 1u);
  EXPECT_EQ(boxes[0].class_id, 2);
  EXPECT_EQ(skipped, 4u);
}

TEST(YoloLabels, BoxesAreClippedToImage) {
  std::istringstream in("0 0.95 0.5 0.2 0.2\n");
  std::size_t skipped = 0;
  const auto boxes = parse_yolo_labels(in, 100, 100, "c", skipped);
  ASSERT_EQ(boxes.size(), 1u);
  EXPECT_DOUBLE_EQ(boxes[0].box.x2, 100.0);
  EXPECT_TRUE(boxes[0].box.valid());
}

// ---------------------------------------------------------------- dataset on disk

TEST(YoloDatasetTest, MissingSplitIsConfigError) {
  const auto root = fresh_dir("epanet_missing_split");
  EXPECT_THROW(load_yolo_dataset(root, Split::val), ConfigError);
}

TEST(YoloDatasetTest, WriteThenLoadRoundTrip) {
  const auto root = fresh_dir("epanet_yolo_roundtrip");
  const auto samples = synth_dataset(3, 5, 64, 3);
  write_yolo_dataset(samples, root, Split::train);
  const auto ds = load_yolo_dataset(root, Split::train);
  ASSERT_EQ(ds.size(), samples.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto s = ds.get(i);
    // Sorted paths; synthetic ids sort in generation order.
    EXPECT_EQ(s.image_id, samples[i].image_id);
    EXPECT_TRUE(same_image(s.image, samples[i].image));
    ASSERT_EQ(s.boxes.size(), samples[i].boxes.size());
    for (std::size_t k = 0; k < s.boxes.size(); ++k) {
      EXPECT_EQ(s.boxes[k].class_id, samples[i].boxes[k].class_id);
      EXPECT_NEAR(s.boxes[k].box.x1, samples[i].boxes[k].box.x1, 1e-3);
      EXPECT_NEAR(s.boxes[k].box.y2, samples[i].boxes[k].box.y2, 1e-3);
    }
  }
}

TEST(YoloDatasetTest, ImageWithoutLabelIsBackgroundAndSkippedLinesAreCounted) {
  const auto root = fresh_dir("epanet_yolo_background");
  std::filesystem::create_directories(root / "images" / "val");
  std::filesystem::create_directories(root / "labels" / "val");
  cv::imwrite((root / "images" / "val" / "a.png").string(), cv::Mat(32, 32, CV_8UC3, cv::Scalar(1, 2, 3)));
  cv::imwrite((root / "images" / "val" / "b.png").string(), cv::Mat(32, 32, CV_8UC3, cv::Scalar(4, 5, 6)));
  std::ofstream((root / "labels" / "val" / "b.txt").string()) << "0 0.5 0.5 0.5 0.5\n0 0.5 0.5 0 0\n";
  const auto ds = load_yolo_dataset(root, Split::val);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_TRUE(ds.get(0).boxes.empty());
  EXPECT_EQ(ds.get(1).boxes.size(), 1u);
  EXPECT_EQ(ds.skipped_lines().at((root / "labels" / "val" / "b.txt").string()), 1u);
  EXPECT_EQ(ds.image_ids(), (std::vector<std::string>{"a", "b"}));
}

// ---------------------------------------------------------------- synthetic shapes

TEST(Synth, SameSeedIsBitwiseIdentical) {
  const auto a = synth_dataset(7, 16, 64, 3);
  const auto b = synth_dataset(7, 16, 64, 3);
  ASSERT_EQ(a.size(), 16u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image_id, b[i].image_id);
    EXPECT_TRUE(same_image(a[i].image, b[i].image));
    ASSERT_EQ(a[i].boxes.size(), b[i].boxes.size());
    for (std::size_t k = 0; k < a[i].boxes.size(); ++k) EXPECT_EQ(a[i].boxes[k].box, b[i].boxes[k].box);
  }
}

TEST(Synth, DifferentSeedsDiffer) {
  EXPECT_FALSE(same_image(synth_dataset(1, 1, 64, 3)[0].image, synth_dataset(2, 1, 64, 3)[0].image));
}

TEST(Synth, SampleDoesNotDependOnCount) {
  const auto few = synth_dataset(9, 3, 64, 2);
  const auto many = synth_dataset(9, 10, 64, 2);
  for (std::size_t i = 0; i < few.size(); ++i) EXPECT_TRUE(same_image(few[i].image, many[i].image));
}

TEST(Synth, BoxesAreInsideImageWithPositiveArea) {
  for (const auto& s : synth_dataset(11, 200, 64, 4)) {
    EXPECT_EQ(s.image.rows, 64);
    EXPECT_EQ(s.image.type(), CV_8UC3);
    ASSERT_GE(s.boxes.size(), 1u);
    ASSERT_LE(s.boxes.size(), 4u);
    for (const auto& b : s.boxes) {
      EXPECT_GE(b.box.area(), 1.0);
      EXPECT_GE(b.box.x1, 0.0);
      EXPECT_GE(b.box.y1, 0.0);
      EXPECT_LE(b.box.x2, 64.0);
      EXPECT_LE(b.box.y2, 64.0);
      EXPECT_GE(b.class_id, 0);
      EXPECT_LT(b.class_id, 4);
    }
  }
}

TEST(Synth, ClassHistogramIsNearUniform) {
  const int classes = 4;
  std::vector<double> counts(classes, 0.0);
  double total = 0;
  for (const auto& s : synth_dataset(2024, 1000, 64, classes)) {
    for (const auto& b : s.boxes) {
      counts[static_cast<std::size_t>(b.class_id)] += 1;
      total += 1;
    }
  }
  const double expected = total / classes;
  for (int c = 0; c < classes; ++c) {
    EXPECT_NEAR(counts[static_cast<std::size_t>(c)], expected, 0.10 * expected) << "class " << c;
  }
}

// ---------------------------------------------------------------- letterbox

TEST(Letterbox, SquareTargetSizeIsIdentity) {
  const cv::Mat img(640, 640, CV_8UC3, cv::Scalar(10, 20, 30));
  const auto lb = letterbox(img, 640);
  EXPECT_TRUE(lb.transform.is_identity());
  EXPECT_TRUE(same_image(lb.image, img));
}

TEST(Letterbox, WideImageIsHalvedAndPaddedVertically) {
  const cv::Mat img(640, 1280, CV_8UC3, cv::Scalar(0, 0, 0));
  const auto lb = letterbox(img, 640);
  EXPECT_DOUBLE_EQ(lb.transform.scale, 0.5);
  EXPECT_DOUBLE_EQ(lb.transform.pad_x, 0.0);
  EXPECT_DOUBLE_EQ(lb.transform.pad_y, 160.0);
  EXPECT_EQ(lb.image.rows, 640);
  EXPECT_EQ(lb.image.cols, 640);
  EXPECT_EQ(lb.image.at<cv::Vec3b>(0, 0), cv::Vec3b(114, 114, 114));
  EXPECT_EQ(lb.image.at<cv::Vec3b>(639, 320), cv::Vec3b(114, 114, 114));
  EXPECT_EQ(lb.image.at<cv::Vec3b>(320, 320), cv::Vec3b(0, 0, 0));
}

TEST(Letterbox, RandomBoxesRoundTripWithinOnePixel) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> side(40, 900);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int w = side(rng), h = side(rng);
    const auto lb = letterbox(cv::Mat(h, w, CV_8UC3, cv::Scalar(1, 1, 1)), 320);
    for (int k = 0; k < 5; ++k) {
      const double x1 = unit(rng) * (w - 2), y1 = unit(rng) * (h - 2);
      const Box box{x1, y1, x1 + 1 + unit(rng) * (w - x1 - 1), y1 + 1 + unit(rng) * (h - y1 - 1)};
      const Box back = lb.transform.to_original(lb.transform.to_network(box));
      EXPECT_NEAR(back.x1, box.x1, 1.0);
      EXPECT_NEAR(back.y1, box.y1, 1.0);
      EXPECT_NEAR(back.x2, box.x2, 1.0);
      EXPECT_NEAR(back.y2, box.y2, 1.0);
    }
  }
}

TEST(Letterbox, SampleBoxesFollowTheImage) {
  Sample s{cv::Mat(100, 200, CV_8UC3, cv::Scalar(0, 0, 0)), {{1, {20, 10, 60, 50}, "s"}}, "s"};
  const auto lb = letterbox_sample(s, 64);
  ASSERT_EQ(lb.boxes.size(), 1u);
  const double scale = 64.0 / 200.0;
  const double pad_y = (64 - 100 * scale) / 2.0;
  EXPECT_NEAR(lb.boxes[0].box.x1, 20 * scale, 1e-9);
  EXPECT_NEAR(lb.boxes[0].box.y1, 10 * scale + std::floor(pad_y), 1.0);
}

TEST(Augment, HorizontalFlipMirrorsBoxes) {
  cv::Mat img(10, 20, CV_8UC3, cv::Scalar(0, 0, 0));
  img.at<cv::Vec3b>(0, 0) = cv::Vec3b(255, 255, 255);
  const Sample s{img, {{0, {2, 1, 6, 5}, "f"}}, "f"};
  const auto f = hflip(s);
  EXPECT_EQ(f.image.at<cv::Vec3b>(0, 19), cv::Vec3b(255, 255, 255));
  EXPECT_EQ(f.boxes[0].box, (Box{14, 1, 18, 5}));
  EXPECT_EQ(hflip(f).boxes[0].box, s.boxes[0].box);
}

TEST(Splits, NamesParse) {
  EXPECT_EQ(parse_split("val"), Split::val);
  EXPECT_EQ(to_string(Split::test), "test");
  EXPECT_THROW(parse_split("holdout"), ConfigError);
}
