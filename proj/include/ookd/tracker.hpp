#pragma once

#include <string>
#include <vector>

#include "ookd/model.hpp"
#include "ookd/dataset.hpp"

namespace ookd::track {

struct TrackerConfig {
  double conf_threshold = 0.5;
  double spawn_threshold = 0.3;  // cosine similarity below this spawns a new id
  double momentum = 0.75;        // memory update e <- norm(a*e + (1-a)*f)
  int retire_after = 10;         // frames unseen before an entry is dropped

  nlohmann::json to_json() const;
  static TrackerConfig from_json(const nlohmann::json& j);
};

struct Detection {
  int query_index = 0;
  int class_id = 0;
  double score = 0.0;
  data::Box box{0, 0, 0, 0};
  data::Mask mask;        // full resolution, conflict-resolved
  nn::Tensor embedding;   // C, unit norm
};

// Score-ordered post-processing of one frame's query set.
std::vector<Detection> detect(const model::FrameOutputs& out, int num_classes,
                              double conf_threshold, int frame_h, int frame_w);

struct MemoryEntry {
  int instance_id = 0;
  nn::Tensor embedding;  // unit norm
  int last_seen = 0;
};

class MemoryBank {
 public:
  explicit MemoryBank(const TrackerConfig& cfg) : cfg_(cfg) {}

  // One-to-one Hungarian assignment on cosine similarity; pairs below the
  // spawn threshold are rejected and spawn fresh ids instead. Returns the id
  // for each detection, in order.
  std::vector<int> assign_ids(const std::vector<Detection>& detections, int frame_index);

  const std::vector<MemoryEntry>& entries() const { return entries_; }
  int next_id() const { return next_id_; }

 private:
  TrackerConfig cfg_;
  std::vector<MemoryEntry> entries_;
  int next_id_ = 0;
};

struct TrackResult {
  int instance_id = 0;
  int class_id = 0;
  double score = 0.0;
  std::vector<data::Mask> masks;  // one per frame, empty when undetected
};

// Strictly causal frame-by-frame inference over a clip.
std::vector<TrackResult> track_video(const data::VideoClip& clip,
                                     const model::VisModel& m, const TrackerConfig& cfg);

// Results file: one JSON per video with RLE masks, same encoding as the
// dataset annotations.
void save_results(const std::string& dir, const data::VideoClip& clip,
                  const std::vector<TrackResult>& tracks);
std::vector<TrackResult> load_results(const std::string& path, int* num_frames = nullptr,
                                      std::string* clip_id = nullptr);

// Bilinear upsampling of a logits grid by an integer factor.
nn::Tensor upsample_bilinear(const nn::Tensor& grid, int factor);

}  // namespace ookd::track
