#pragma once

#include <vector>

#include "ookd/dataset.hpp"
#include "ookd/tape.hpp"

namespace ookd::losses {

struct LossWeights {
  double lambda1 = 2.0;  // box
  double lambda2 = 2.0;  // mask
  double lambda3 = 1.0;  // embed
  double lambda4 = 1.0;  // kd
  double no_object_weight = 0.1;
  double embed_temperature = 0.1;

  void validate() const;
};

// Predictions of one frame, as tape vars from a single forward pass.
struct FramePredictions {
  nn::Var class_logits;  // N x (classes + 1), no-object slot last
  nn::Var boxes;         // N x 4 normalized cxcywh
  nn::Var mask_logits;   // N x (H'*W'), stride-4 grid
  nn::Var embeddings;    // N x C, unit rows
};

// Ground truth restricted to the instances visible in one frame.
struct FrameGroundTruth {
  std::vector<int> classes;
  std::vector<data::Box> boxes;
  std::vector<nn::Tensor> masks;  // soft stride-4 targets in [0,1], H' x W'
  std::vector<int> track_ids;     // instance ids, for cross-frame pairing
};

// Average-pool a binary mask by `factor` into a soft [0,1] grid.
nn::Tensor downsample_mask(const data::Mask& m, int factor);

// Visible instances of clip frame t with stride-4 soft mask targets.
FrameGroundTruth frame_ground_truth(const data::VideoClip& clip, int t, int mask_stride = 4);

struct ScalarFlag {
  nn::Var value;
  bool skipped = false;
};

// Eq-style cosine distillation loss: (1/M) * sum_m (1 - cos(teacher_m, student_m)).
// The teacher side is a constant; gradients flow only into the student rows.
// M = 0 yields a zero constant with skipped = true.
ScalarFlag kd_loss(nn::Tape& t, nn::Var student_pairs, const nn::Tensor& teacher_pairs);

// Plain evaluation used by tooling and tests.
double kd_loss_value(const nn::Tensor& student_pairs, const nn::Tensor& teacher_pairs,
                     bool* skipped = nullptr);

// Matched queries are pushed toward their class, all others toward the
// no-object slot (last column) at weight no_object_weight.
nn::Var classification_loss(nn::Tape& t, nn::Var class_logits,
                            const std::vector<int>& sigma,
                            const std::vector<int>& gt_classes, double no_object_weight);

// L1 + (1 - GIoU) over matched pairs, averaged over M. M = 0 -> zero constant.
nn::Var box_loss(nn::Tape& t, nn::Var pred_boxes, const std::vector<int>& sigma,
                 const std::vector<data::Box>& gt_boxes);

// Differentiable GIoU of each predicted row against the paired target row.
nn::Var giou_rows(nn::Tape& t, nn::Var pred_boxes, const nn::Tensor& gt_boxes);

// Dice (squared-denominator form) + BCE per matched pair at stride-4
// resolution, averaged over pairs; empty ground-truth masks are skipped.
nn::Var mask_loss(nn::Tape& t, nn::Var mask_logits, const std::vector<int>& sigma,
                  const std::vector<nn::Tensor>& gt_masks);

// Symmetric two-frame contrastive loss over embeddings of instances present
// in both frames; rows of a/b are aligned by instance. Fewer than two shared
// instances -> zero with skipped = true (no negatives).
ScalarFlag embed_loss(nn::Tape& t, nn::Var matched_a, nn::Var matched_b,
                      double temperature);

struct IdolBreakdown {
  double cls = 0.0, box = 0.0, mask = 0.0, embed = 0.0, total = 0.0;
  bool embed_skipped = false;
};

// Per-frame part of the composite loss: cls + lambda1*box + lambda2*mask.
nn::Var idol_frame_terms(nn::Tape& t, const FramePredictions& preds,
                         const FrameGroundTruth& gt, const std::vector<int>& sigma,
                         const LossWeights& w, IdolBreakdown* breakdown = nullptr);

// Full composite over a two-frame sample, plus the embedding term.
nn::Var idol_loss(nn::Tape& t, const FramePredictions& preds_a,
                  const FrameGroundTruth& gt_a, const std::vector<int>& sigma_a,
                  const FramePredictions& preds_b, const FrameGroundTruth& gt_b,
                  const std::vector<int>& sigma_b, const LossWeights& w,
                  IdolBreakdown* breakdown = nullptr);

nn::Var total_loss(nn::Tape& t, nn::Var idol, nn::Var kd, double lambda4);

}  // namespace ookd::losses
