#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

#include "epanet/types.hpp"

// Dataset ingestion (YOLO layout), letterboxing and a deterministic
// synthetic-shapes generator. Images are 8-bit BGR.

namespace epanet::data {

struct Sample {
  cv::Mat image;  // H x W x 3, CV_8UC3
  std::vector<GroundTruthBox> boxes;
  std::string image_id;
};

enum class Split { train, val, test };
Split parse_split(std::string_view name);
std::string_view to_string(Split split);

/// Parses "class cx cy w h" lines (normalized to [0, 1]) into pixel corner
/// boxes clipped to the image. Malformed or zero-size lines are skipped and
/// counted in `skipped`.
std::vector<GroundTruthBox> parse_yolo_labels(std::istream& in, int width, int height, const std::string& image_id,
                                              std::size_t& skipped);

/// Lazy view over root/images/{split} and root/labels/{split}. Images are
/// read on access; an image without a label file is a background sample.
class YoloDataset {
 public:
  YoloDataset(std::filesystem::path root, Split split);

  std::size_t size() const { return images_.size(); }
  Sample get(std::size_t index) const;
  const std::vector<std::filesystem::path>& image_paths() const { return images_; }
  std::vector<std::string> image_ids() const;

  /// Skipped label lines per label file, for files read so far.
  std::map<std::string, std::size_t> skipped_lines() const { return skipped_; }

 private:
  std::filesystem::path root_;
  Split split_;
  std::vector<std::filesystem::path> images_;
  mutable std::map<std::string, std::size_t> skipped_;
};

/// Throws ConfigError when the split directory is missing.
YoloDataset load_yolo_dataset(const std::filesystem::path& root, Split split);

/// Synthetic shapes: 1-4 non-overlapping coloured ellipses / rectangles on a
/// textured noise background. Class selects hue and shape. A pure function of
/// its arguments; sample i does not depend on n.
std::vector<Sample> synth_dataset(std::uint64_t seed, int n, int size, int classes);

/// Writes samples as PNG images and normalized label files under
/// root/images/{split} and root/labels/{split}.
void write_yolo_dataset(const std::vector<Sample>& samples, const std::filesystem::path& root, Split split);

/// Maps between original pixels and letterboxed network pixels.
struct LetterboxTransform {
  double scale = 1.0;
  double pad_x = 0.0;  // left padding
  double pad_y = 0.0;  // top padding
  int source_width = 0;
  int source_height = 0;
  int target_size = 0;

  Box to_network(const Box& box) const;
  /// Inverse mapping, clipped to the original image.
  Box to_original(const Box& box) const;
  bool is_identity() const { return scale == 1.0 && pad_x == 0.0 && pad_y == 0.0; }
};

struct Letterboxed {
  cv::Mat image;
  LetterboxTransform transform;
};

/// Aspect-preserving resize plus symmetric gray (114) padding to a square
/// target. target_size must be divisible by 32.
Letterboxed letterbox(const cv::Mat& image, int target_size);

/// Letterboxes a sample, mapping its boxes into network pixels.
Sample letterbox_sample(const Sample& sample, int target_size);

/// Horizontal flip of image and boxes.
Sample hflip(const Sample& sample);

}  // namespace epanet::data
