#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "ookd/dataset.hpp"
#include "ookd/model.hpp"

namespace ookd::evalkit {

// Spatio-temporal IoU: intersections and unions are summed over frames
// before dividing. Shorter tracks are padded with empty masks.
double sequence_iou(const std::vector<data::Mask>& pred, const std::vector<data::Mask>& gt);

struct PredTrack {
  std::string clip_id;
  int class_id = 0;
  double score = 0.0;
  std::vector<data::Mask> masks;
};

struct GtTrack {
  std::string clip_id;
  int class_id = 0;
  std::vector<data::Mask> masks;
};

struct EvalResult {
  double mAP = 0.0;  // mean over classes and IoU thresholds 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ar1 = 0.0;
  double ar10 = 0.0;
  std::vector<double> per_class_ap;         // -1 for classes without ground truth
  std::vector<double> ap_per_threshold;     // mean over classes, one per threshold
  std::vector<double> iou_thresholds;
  int64_t matched = 0, missed = 0, false_positives = 0;  // at IoU 0.5

  bool ap_monotone_in_threshold(double tol = 1e-9) const;
  nlohmann::json to_json() const;
};

std::vector<double> default_iou_thresholds();

// Class-aware greedy matching in descending score order, 101-point
// interpolated AP, COCO-style AR at 1 and 10 detections per video.
EvalResult video_map(const std::vector<PredTrack>& preds, const std::vector<GtTrack>& gts,
                     int num_classes,
                     const std::vector<double>& thresholds = default_iou_thresholds());

struct SimilarityHistogram {
  std::vector<int64_t> bins;  // over [-1, 1]
  double mean = 0.0;
  int64_t count = 0;

  double bin_width() const { return 2.0 / static_cast<double>(bins.size()); }
  nlohmann::json to_json() const;
};

struct SimilarityOptions {
  int num_videos = 100;
  int bins = 40;
  int pairs_per_instance = 5;
  double lambda_b = 2.0;
  uint64_t seed = 0;
};

// Cosine similarity between ground-truth-matched query embeddings of the
// same instance on two different frames, sampled over the dataset.
SimilarityHistogram similarity_histogram(const model::VisModel& m,
                                         const std::vector<data::VideoClip>& clips,
                                         const SimilarityOptions& opts);

}  // namespace ookd::evalkit
