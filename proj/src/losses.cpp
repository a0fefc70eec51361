#include "ookd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace ookd::losses {

using nn::Tape;
using nn::Tensor;
using nn::Var;

void LossWeights::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || lambda4 < 0) {
    throw ValidationError("LossWeights: lambdas must be non-negative");
  }
  if (no_object_weight <= 0) {
    throw ValidationError("LossWeights: no_object_weight must be positive");
  }
  if (embed_temperature <= 0) {
    throw ValidationError("LossWeights: embed_temperature must be positive");
  }
}

Tensor downsample_mask(const data::Mask& m, int factor) {
  int oh = (m.height + factor - 1) / factor;
  int ow = (m.width + factor - 1) / factor;
  Tensor out({oh, ow});
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      int sum = 0;
      for (int dy = 0; dy < factor; ++dy) {
        for (int dx = 0; dx < factor; ++dx) {
          int sy = y * factor + dy, sx = x * factor + dx;
          if (sy < m.height && sx < m.width) sum += m.at(sy, sx);
        }
      }
      out.at(y, x) = static_cast<double>(sum) / static_cast<double>(factor * factor);
    }
  }
  return out;
}

FrameGroundTruth frame_ground_truth(const data::VideoClip& clip, int t, int mask_stride) {
  FrameGroundTruth gt;
  for (const data::InstanceTrack& tr : clip.instances) {
    if (!tr.visible[static_cast<size_t>(t)]) continue;
    gt.classes.push_back(tr.class_id);
    gt.boxes.push_back(tr.boxes[static_cast<size_t>(t)]);
    gt.masks.push_back(downsample_mask(tr.masks[static_cast<size_t>(t)], mask_stride));
    gt.track_ids.push_back(tr.instance_id);
  }
  return gt;
}

ScalarFlag kd_loss(Tape& t, Var student_pairs, const Tensor& teacher_pairs) {
  int M = static_cast<int>(teacher_pairs.rows());
  if (M == 0) return {t.leaf(Tensor::scalar(0.0)), true};
  if (student_pairs.val().shape() != teacher_pairs.shape()) {
    throw ValidationError("kd_loss: student/teacher pair shape mismatch");
  }
  // Normalize both sides; the teacher is detached by construction (a leaf).
  Tensor teacher_unit = teacher_pairs.clone();
  for (int m = 0; m < M; ++m) {
    double n = teacher_unit.mat().row(m).norm();
    if (n < 1e-12) throw ValidationError("kd_loss: zero teacher embedding");
    teacher_unit.mat().row(m) /= n;
  }
  Var s = nn::unit_rows(student_pairs);
  Var cos_sum = nn::vsum(nn::mul(s, t.leaf(teacher_unit)));
  Var loss = nn::scale(nn::add_scalar(nn::scale(cos_sum, 1.0 / M), -1.0), -1.0);
  return {loss, false};
}

double kd_loss_value(const Tensor& student_pairs, const Tensor& teacher_pairs,
                     bool* skipped) {
  if (teacher_pairs.rows() == 0) {
    if (skipped) *skipped = true;
    return 0.0;
  }
  if (skipped) *skipped = false;
  if (!(student_pairs.shape() == teacher_pairs.shape())) {
    throw ValidationError("kd_loss: student/teacher pair shape mismatch");
  }
  int M = static_cast<int>(teacher_pairs.rows());
  double acc = 0.0;
  for (int m = 0; m < M; ++m) {
    double ns = student_pairs.mat().row(m).norm();
    double nt = teacher_pairs.mat().row(m).norm();
    if (ns < 1e-12 || nt < 1e-12) throw ValidationError("kd_loss: zero embedding");
    double dot = (student_pairs.mat().row(m).array() * teacher_pairs.mat().row(m).array()).sum();
    acc += 1.0 - dot / (ns * nt);
  }
  return acc / M;
}

Var classification_loss(Tape& t, Var class_logits, const std::vector<int>& sigma,
                        const std::vector<int>& gt_classes, double no_object_weight) {
  const Tensor& lv = class_logits.val();
  int N = static_cast<int>(lv.rows());
  int no_object = static_cast<int>(lv.cols()) - 1;
  std::vector<int> targets(static_cast<size_t>(N), no_object);
  std::vector<double> weights(static_cast<size_t>(N), no_object_weight);
  for (size_t m = 0; m < sigma.size(); ++m) {
    int q = sigma[m];
    if (q < 0 || q >= N) throw ValidationError("classification_loss: sigma out of range");
    targets[static_cast<size_t>(q)] = gt_classes[m];
    weights[static_cast<size_t>(q)] = 1.0;
  }
  return nn::weighted_ce_rows(class_logits, targets, weights);
}

Var giou_rows(Tape& t, Var pred_boxes, const Tensor& gt_boxes) {
  int M = static_cast<int>(gt_boxes.rows());
  if (pred_boxes.val().dim(0) != M) throw ValidationError("giou_rows: row count mismatch");
  auto col = [&](Var v, int i) { return nn::slice_cols(v, i, 1); };
  Var pcx = col(pred_boxes, 0), pcy = col(pred_boxes, 1);
  Var pw = col(pred_boxes, 2), ph = col(pred_boxes, 3);
  Var px1 = nn::sub(pcx, nn::scale(pw, 0.5)), px2 = nn::add(pcx, nn::scale(pw, 0.5));
  Var py1 = nn::sub(pcy, nn::scale(ph, 0.5)), py2 = nn::add(pcy, nn::scale(ph, 0.5));

  Tensor gx1({M, 1}), gx2({M, 1}), gy1({M, 1}), gy2({M, 1}), garea({M, 1});
  for (int m = 0; m < M; ++m) {
    double cx = gt_boxes.at(m, 0), cy = gt_boxes.at(m, 1);
    double w = gt_boxes.at(m, 2), h = gt_boxes.at(m, 3);
    if (w <= 0 || h <= 0) throw ValidationError("giou_rows: ground-truth box has non-positive size");
    gx1.at(m, 0) = cx - w / 2;
    gx2.at(m, 0) = cx + w / 2;
    gy1.at(m, 0) = cy - h / 2;
    gy2.at(m, 0) = cy + h / 2;
    garea.at(m, 0) = w * h;
  }
  Var vgx1 = t.leaf(gx1), vgx2 = t.leaf(gx2), vgy1 = t.leaf(gy1), vgy2 = t.leaf(gy2);

  Var iw = nn::relu(nn::sub(nn::vmin(px2, vgx2), nn::vmax(px1, vgx1)));
  Var ih = nn::relu(nn::sub(nn::vmin(py2, vgy2), nn::vmax(py1, vgy1)));
  Var inter = nn::mul(iw, ih);
  Var parea = nn::mul(pw, ph);
  Var uni = nn::sub(nn::add(parea, t.leaf(garea)), inter);
  Var hw = nn::sub(nn::vmax(px2, vgx2), nn::vmin(px1, vgx1));
  Var hh = nn::sub(nn::vmax(py2, vgy2), nn::vmin(py1, vgy1));
  Var hull = nn::mul(hw, hh);
  return nn::sub(nn::vdiv(inter, uni), nn::vdiv(nn::sub(hull, uni), hull));
}

Var box_loss(Tape& t, Var pred_boxes, const std::vector<int>& sigma,
             const std::vector<data::Box>& gt_boxes) {
  int M = static_cast<int>(sigma.size());
  if (M == 0) return t.leaf(Tensor::scalar(0.0));
  Tensor gt({M, 4});
  for (int m = 0; m < M; ++m) {
    for (int k = 0; k < 4; ++k) {
      gt.at(m, k) = gt_boxes[static_cast<size_t>(m)][static_cast<size_t>(k)];
    }
  }
  Var matched = nn::gather_rows(pred_boxes, sigma);
  Var l1 = nn::vsum(nn::vabs(nn::sub(matched, t.leaf(gt))));
  Var giou_term = nn::vsum(nn::add_scalar(nn::scale(giou_rows(t, matched, gt), -1.0), 1.0));
  return nn::scale(nn::add(l1, giou_term), 1.0 / M);
}

Var mask_loss(Tape& t, Var mask_logits, const std::vector<int>& sigma,
              const std::vector<nn::Tensor>& gt_masks) {
  constexpr double kEps = 1e-6;
  std::vector<Var> terms;
  for (size_t m = 0; m < sigma.size(); ++m) {
    const Tensor& gm = gt_masks[m];
    double gsum2 = (gm.vec().array() * gm.vec().array()).sum();
    if (gsum2 == 0.0) continue;  // sentinel skip for empty targets
    Tensor gflat = gm.reshaped({1, static_cast<int>(gm.numel())});
    Var logit_row = nn::slice_rows(mask_logits, sigma[m], 1);
    Var p = nn::sigmoid(logit_row);
    Var gleaf = t.leaf(gflat);
    Var num = nn::add_scalar(nn::scale(nn::vsum(nn::mul(p, gleaf)), 2.0), kEps);
    Var den = nn::add_scalar(nn::vsum(nn::mul(p, p)), gsum2 + kEps);
    Var dice = nn::add_scalar(nn::scale(nn::vdiv(num, den), -1.0), 1.0);
    Var bce = nn::bce_with_logits_mean(logit_row, gflat);
    terms.push_back(nn::add(dice, bce));
  }
  if (terms.empty()) return t.leaf(Tensor::scalar(0.0));
  Var acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = nn::add(acc, terms[i]);
  return nn::scale(acc, 1.0 / static_cast<double>(terms.size()));
}

ScalarFlag embed_loss(Tape& t, Var matched_a, Var matched_b, double temperature) {
  int M = static_cast<int>(matched_a.val().rows());
  if (M != static_cast<int>(matched_b.val().rows())) {
    throw ValidationError("embed_loss: row count mismatch");
  }
  if (M < 2) return {t.leaf(Tensor::scalar(0.0)), true};
  Var sim = nn::scale(nn::matmul(matched_a, nn::transpose(matched_b)), 1.0 / temperature);
  std::vector<int> targets(static_cast<size_t>(M));
  for (int i = 0; i < M; ++i) targets[static_cast<size_t>(i)] = i;
  std::vector<double> ones(static_cast<size_t>(M), 1.0);
  Var la = nn::weighted_ce_rows(sim, targets, ones);
  Var lb = nn::weighted_ce_rows(nn::transpose(sim), targets, ones);
  return {nn::scale(nn::add(la, lb), 0.5), false};
}

Var idol_frame_terms(Tape& t, const FramePredictions& preds, const FrameGroundTruth& gt,
                     const std::vector<int>& sigma, const LossWeights& w,
                     IdolBreakdown* breakdown) {
  Var cls = classification_loss(t, preds.class_logits, sigma, gt.classes, w.no_object_weight);
  Var box = box_loss(t, preds.boxes, sigma, gt.boxes);
  Var mask = mask_loss(t, preds.mask_logits, sigma, gt.masks);
  if (breakdown) {
    breakdown->cls += cls.val().item();
    breakdown->box += box.val().item();
    breakdown->mask += mask.val().item();
  }
  return nn::add(cls, nn::add(nn::scale(box, w.lambda1), nn::scale(mask, w.lambda2)));
}

namespace {

// Rows of embeddings matched to the instances present in both frames,
// aligned by track id.
std::pair<Var, Var> shared_matched_embeddings(const FramePredictions& pa,
                                              const FrameGroundTruth& ga,
                                              const std::vector<int>& sigma_a,
                                              const FramePredictions& pb,
                                              const FrameGroundTruth& gb,
                                              const std::vector<int>& sigma_b) {
  std::vector<int> rows_a, rows_b;
  for (size_t i = 0; i < ga.track_ids.size(); ++i) {
    for (size_t j = 0; j < gb.track_ids.size(); ++j) {
      if (ga.track_ids[i] == gb.track_ids[j]) {
        rows_a.push_back(sigma_a[i]);
        rows_b.push_back(sigma_b[j]);
      }
    }
  }
  if (rows_a.empty()) return {Var{}, Var{}};
  return {nn::gather_rows(pa.embeddings, rows_a), nn::gather_rows(pb.embeddings, rows_b)};
}

}  // namespace

Var idol_loss(Tape& t, const FramePredictions& preds_a, const FrameGroundTruth& gt_a,
              const std::vector<int>& sigma_a, const FramePredictions& preds_b,
              const FrameGroundTruth& gt_b, const std::vector<int>& sigma_b,
              const LossWeights& w, IdolBreakdown* breakdown) {
  Var fa = idol_frame_terms(t, preds_a, gt_a, sigma_a, w, breakdown);
  Var fb = idol_frame_terms(t, preds_b, gt_b, sigma_b, w, breakdown);
  Var frame_mean = nn::scale(nn::add(fa, fb), 0.5);
  if (breakdown) {
    breakdown->cls *= 0.5;
    breakdown->box *= 0.5;
    breakdown->mask *= 0.5;
  }

  auto [ea, eb] = shared_matched_embeddings(preds_a, gt_a, sigma_a, preds_b, gt_b, sigma_b);
  ScalarFlag emb{t.leaf(Tensor::scalar(0.0)), true};
  if (ea.defined()) emb = embed_loss(t, ea, eb, w.embed_temperature);
  if (breakdown) {
    breakdown->embed = emb.value.val().item();
    breakdown->embed_skipped = emb.skipped;
  }
  Var total = nn::add(frame_mean, nn::scale(emb.value, w.lambda3));
  if (breakdown) breakdown->total = total.val().item();
  return total;
}

Var total_loss(Tape& t, Var idol, Var kd, double lambda4) {
  return nn::add(idol, nn::scale(kd, lambda4));
}

}  // namespace ookd::losses
