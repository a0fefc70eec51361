#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ookd/common.hpp"
#include "ookd/png_io.hpp"

namespace ookd::data {

// Binary visible-region mask.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> bits;  // 0/1, row-major

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), bits(static_cast<size_t>(h) * w, 0) {}

  uint8_t& at(int y, int x) { return bits[static_cast<size_t>(y) * width + x]; }
  uint8_t at(int y, int x) const { return bits[static_cast<size_t>(y) * width + x]; }
  int64_t area() const {
    int64_t a = 0;
    for (uint8_t b : bits) a += b;
    return a;
  }
  bool empty() const { return area() == 0; }
  bool operator==(const Mask& o) const {
    return height == o.height && width == o.width && bits == o.bits;
  }
};

// Row-major run-length encoding, counts-first: counts[0] is the length of
// the leading run of zeros (possibly 0), runs alternate 0/1 afterwards.
std::vector<int> rle_encode(const Mask& m);
Mask rle_decode(int height, int width, const std::vector<int>& counts);

// Normalized (cx, cy, w, h). Invisible frames carry the all-zero sentinel.
using Box = std::array<double, 4>;

// Tight axis-aligned box of a non-empty mask, exact from pixel extents.
Box box_from_mask(const Mask& m);

struct InstanceTrack {
  int instance_id = 0;
  int class_id = 0;
  std::vector<Mask> masks;     // exactly T entries, empty mask when invisible
  std::vector<Box> boxes;      // T entries, zero sentinel when invisible
  std::vector<uint8_t> visible;  // T entries

  bool operator==(const InstanceTrack& o) const {
    return instance_id == o.instance_id && class_id == o.class_id && masks == o.masks &&
           boxes == o.boxes && visible == o.visible;
  }
};

struct VideoClip {
  std::string clip_id;
  int height = 0;
  int width = 0;
  std::vector<Image> frames;
  std::vector<InstanceTrack> instances;

  int num_frames() const { return static_cast<int>(frames.size()); }
  bool operator==(const VideoClip& o) const {
    return clip_id == o.clip_id && height == o.height && width == o.width &&
           frames == o.frames && instances == o.instances;
  }
};

struct ShapeClass {
  std::string name;
  std::string kind;  // ellipse | rectangle | triangle | ring | star
  std::array<uint8_t, 3> color{200, 200, 200};
  double weight = 0.0;
};

struct MotionSpec {
  double max_translation = 1.5;   // pixels per frame
  double scale_jitter = 0.08;     // fractional amplitude of smooth size change
  double max_rotation = 0.06;     // radians per frame
  double color_drift = 0.05;      // amplitude of per-frame illumination change
  bool allow_occlusion = true;
};

struct ClipSpec {
  int num_frames = 12;
  int height = 64;
  int width = 64;
  std::vector<ShapeClass> palette;
  int min_instances = 2;
  int max_instances = 4;
  MotionSpec motion;
  bool allow_entry_exit = false;

  // Throws ValidationError naming the offending field.
  void validate() const;
};

// The seven-class imbalanced palette used throughout the experiments.
std::vector<ShapeClass> default_palette();

VideoClip generate_clip(const ClipSpec& spec, uint64_t seed, std::string clip_id = "");

struct DatasetStats {
  std::vector<int64_t> counts;  // per class, instances (tracks)
  std::vector<double> p;        // per class frequency, sums to 1
};

DatasetStats compute_class_stats(const std::vector<VideoClip>& dataset, int num_classes);

struct Dataset {
  std::vector<ShapeClass> classes;
  std::vector<VideoClip> clips;

  int num_classes() const { return static_cast<int>(classes.size()); }
};

// Layout: <root>/clips/<clip_id>/frame_%04d.png, <root>/annotations/<clip_id>.json,
// plus <root>/meta.json describing the class palette.
void save_dataset(const Dataset& ds, const std::string& root);
Dataset load_dataset(const std::string& root, std::vector<std::string>* warnings = nullptr);

}  // namespace ookd::data
