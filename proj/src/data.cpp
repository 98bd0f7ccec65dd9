#include "epanet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "epanet/errors.hpp"

namespace epanet::data {

namespace fs = std::filesystem;

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(name) + "' (train, val, test)");
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

// ---------------------------------------------------------------- YOLO layout

std::vector<GroundTruthBox> parse_yolo_labels(std::istream& in, int width, int height, const std::string& image_id,
                                              std::size_t& skipped) {
  std::vector<GroundTruthBox> boxes;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    int cls = -1;
    double cx = 0, cy = 0, w = 0, h = 0;
    std::string extra;
    if (!(fields >> cls >> cx >> cy >> w >> h) || (fields >> extra) || cls < 0 || !(w > 0.0) || !(h > 0.0) ||
        !std::isfinite(cx) || !std::isfinite(cy) || !std::isfinite(w) || !std::isfinite(h)) {
      ++skipped;
      continue;
    }
    Box box{(cx - w / 2) * width, (cy - h / 2) * height, (cx + w / 2) * width, (cy + h / 2) * height};
    box = {std::clamp(box.x1, 0.0, double(width)), std::clamp(box.y1, 0.0, double(height)),
           std::clamp(box.x2, 0.0, double(width)), std::clamp(box.y2, 0.0, double(height))};
    if (!box.valid()) {
      ++skipped;
      continue;
    }
    boxes.push_back({cls, box, image_id});
  }
  return boxes;
}

YoloDataset::YoloDataset(fs::path root, Split split) : root_(std::move(root)), split_(split) {
  const fs::path dir = root_ / "images" / std::string(to_string(split));
  if (!fs::is_directory(dir)) throw ConfigError("dataset split directory not found: " + dir.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp") images_.push_back(entry.path());
  }
  std::sort(images_.begin(), images_.end());
}

std::vector<std::string> YoloDataset::image_ids() const {
  std::vector<std::string> ids;
  for (const auto& p : images_) ids.push_back(p.stem().string());
  return ids;
}

Sample YoloDataset::get(std::size_t index) const {
  const fs::path& path = images_.at(index);
  Sample s;
  s.image_id = path.stem().string();
  s.image = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (s.image.empty()) throw ConfigError("cannot read image " + path.string());
  const fs::path label = root_ / "labels" / std::string(to_string(split_)) / (s.image_id + ".txt");
  std::ifstream in(label);
  if (!in) return s;  // background image
  std::size_t skipped = 0;
  s.boxes = parse_yolo_labels(in, s.image.cols, s.image.rows, s.image_id, skipped);
  skipped_[label.string()] = skipped;
  if (skipped > 0) warn(label.string() + ": skipped " + std::to_string(skipped) + " malformed label line(s)");
  return s;
}

YoloDataset load_yolo_dataset(const fs::path& root, Split split) { return YoloDataset(root, split); }

void write_yolo_dataset(const std::vector<Sample>& samples, const fs::path& root, Split split) {
  const fs::path images = root / "images" / std::string(to_string(split));
  const fs::path labels = root / "labels" / std::string(to_string(split));
  fs::create_directories(images);
  fs::create_directories(labels);
  for (const auto& s : samples) {
    const auto image_path = images / (s.image_id + ".png");
    if (!cv::imwrite(image_path.string(), s.image)) throw ConfigError("cannot write " + image_path.string());
    std::ofstream out(labels / (s.image_id + ".txt"));
    if (!out) throw ConfigError("cannot write labels for " + s.image_id);
    const double w = s.image.cols, h = s.image.rows;
    for (const auto& b : s.boxes) {
      char line[128];
      std::snprintf(line, sizeof(line), "%d %.6f %.6f %.6f %.6f\n", b.class_id, (b.box.x1 + b.box.x2) / (2 * w),
                    (b.box.y1 + b.box.y2) / (2 * h), b.box.width() / w, b.box.height() / h);
      out << line;
    }
  }
}

// ---------------------------------------------------------------- synthetic shapes

namespace {

cv::Scalar class_colour(int cls, int classes) {
  cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(180.0 * cls / std::max(classes, 1), 230, 235));
  cv::Mat bgr;
  cv::cvtColor(hsv, bgr, cv::COLOR_HSV2BGR);
  const auto px = bgr.at<cv::Vec3b>(0, 0);
  return {double(px[0]), double(px[1]), double(px[2])};
}

bool overlaps(const Box& a, const Box& b, double margin) {
  return a.x1 < b.x2 + margin && b.x1 < a.x2 + margin && a.y1 < b.y2 + margin && b.y1 < a.y2 + margin;
}

Sample synth_sample(std::uint64_t sample_seed, int index, std::uint64_t seed, int size, int classes) {
  std::mt19937_64 rng(sample_seed);
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  Sample s;
  char id[64];
  std::snprintf(id, sizeof(id), "synth_%llu_%05d", static_cast<unsigned long long>(seed), index);
  s.image_id = id;

  // Textured background: gray base, a smooth gradient and per-pixel noise.
  const int base = uniform_int(50, 110);
  const double gx = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
  const double gy = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
  s.image = cv::Mat(size, size, CV_8UC3);
  std::uniform_int_distribution<int> noise(-18, 18);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double v = base + gx * (x - size / 2) + gy * (y - size / 2);
      auto& px = s.image.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) px[c] = cv::saturate_cast<std::uint8_t>(v + noise(rng));
    }
  }

  const int count = uniform_int(1, 4);
  const int min_side = std::max(10, size / 8);
  const int max_side = std::max(min_side + 1, size * 2 / 5);
  for (int k = 0, attempts = 0; k < count && attempts < 100; ++attempts) {
    const int cls = uniform_int(0, classes - 1);
    const int w = uniform_int(min_side, max_side);
    const int h = uniform_int(min_side, max_side);
    const int x1 = uniform_int(0, size - w);
    const int y1 = uniform_int(0, size - h);
    const Box box{double(x1), double(y1), double(x1 + w), double(y1 + h)};
    if (std::any_of(s.boxes.begin(), s.boxes.end(), [&](const GroundTruthBox& g) { return overlaps(g.box, box, 2); }))
      continue;
    const cv::Scalar colour = class_colour(cls, classes);
    if (cls % 2 == 0) {
      cv::rectangle(s.image, cv::Rect(x1, y1, w, h), colour, cv::FILLED);
    } else {
      cv::ellipse(s.image, cv::RotatedRect(cv::Point2f(x1 + w / 2.0f, y1 + h / 2.0f), cv::Size2f(w, h), 0), colour,
                  cv::FILLED, cv::LINE_8);
    }
    s.boxes.push_back({cls, box, s.image_id});
    ++k;
  }
  return s;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::vector<Sample> synth_dataset(std::uint64_t seed, int n, int size, int classes) {
  if (n < 1) throw ConfigError("synth_dataset: n must be at least 1");
  if (size < 32 || size % 32 != 0) throw ConfigError("synth_dataset: size must be a positive multiple of 32");
  if (classes < 1) throw ConfigError("synth_dataset: classes must be positive");
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    samples.push_back(synth_sample(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(i))), i, seed, size, classes));
  }
  return samples;
}

// ---------------------------------------------------------------- letterbox

Box LetterboxTransform::to_network(const Box& b) const {
  return {b.x1 * scale + pad_x, b.y1 * scale + pad_y, b.x2 * scale + pad_x, b.y2 * scale + pad_y};
}

Box LetterboxTransform::to_original(const Box& b) const {
  const double w = source_width, h = source_height;
  return {std::clamp((b.x1 - pad_x) / scale, 0.0, w), std::clamp((b.y1 - pad_y) / scale, 0.0, h),
          std::clamp((b.x2 - pad_x) / scale, 0.0, w), std::clamp((b.y2 - pad_y) / scale, 0.0, h)};
}

Letterboxed letterbox(const cv::Mat& image, int target_size) {
  if (target_size <= 0 || target_size % 32 != 0) throw ConfigError("letterbox: target size must be a multiple of 32");
  if (image.empty()) throw ConfigError("letterbox: empty image");
  Letterboxed out;
  auto& t = out.transform;
  t.source_width = image.cols;
  t.source_height = image.rows;
  t.target_size = target_size;
  t.scale = std::min(double(target_size) / image.cols, double(target_size) / image.rows);
  const int new_w = std::clamp(static_cast<int>(std::lround(image.cols * t.scale)), 1, target_size);
  const int new_h = std::clamp(static_cast<int>(std::lround(image.rows * t.scale)), 1, target_size);
  const int left = (target_size - new_w) / 2;
  const int top = (target_size - new_h) / 2;
  t.pad_x = left;
  t.pad_y = top;
  cv::Mat resized;
  if (new_w == image.cols && new_h == image.rows) {
    resized = image;
  } else {
    cv::resize(image, resized, cv::Size(new_w, new_h), 0, 0, cv::INTER_LINEAR);
  }
  cv::copyMakeBorder(resized, out.image, top, target_size - new_h - top, left, target_size - new_w - left,
                     cv::BORDER_CONSTANT, cv::Scalar(114, 114, 114));
  return out;
}

Sample letterbox_sample(const Sample& sample, int target_size) {
  auto lb = letterbox(sample.image, target_size);
  Sample out{lb.image, {}, sample.image_id};
  for (const auto& g : sample.boxes) out.boxes.push_back({g.class_id, lb.transform.to_network(g.box), g.image_id});
  return out;
}

Sample hflip(const Sample& sample) {
  Sample out{cv::Mat(), {}, sample.image_id};
  cv::flip(sample.image, out.image, 1);
  const double w = sample.image.cols;
  for (const auto& g : sample.boxes) out.boxes.push_back({g.class_id, {w - g.box.x2, g.box.y1, w - g.box.x1, g.box.y2}, g.image_id});
  return out;
}

}  // namespace epanet::data
