#include "ookd/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "ookd/qfa.hpp"

namespace ookd::evalkit {

using nlohmann::json;

double sequence_iou(const std::vector<data::Mask>& pred, const std::vector<data::Mask>& gt) {
  size_t T = std::max(pred.size(), gt.size());
  int64_t inter = 0, uni = 0;
  for (size_t t = 0; t < T; ++t) {
    const data::Mask* p = t < pred.size() ? &pred[t] : nullptr;
    const data::Mask* g = t < gt.size() ? &gt[t] : nullptr;
    if (p && g) {
      if (p->height != g->height || p->width != g->width) {
        throw ValidationError("sequence_iou: mask size mismatch at frame " + std::to_string(t));
      }
      for (size_t i = 0; i < p->bits.size(); ++i) {
        inter += (p->bits[i] & g->bits[i]);
        uni += (p->bits[i] | g->bits[i]);
      }
    } else if (p) {
      uni += p->area();
    } else if (g) {
      uni += g->area();
    }
  }
  if (uni == 0) return 0.0;  // both tracks fully empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

struct ClassEval {
  // Predictions of one class pooled over videos, with per-video GT groups.
  struct Pred {
    double score;
    int video;
    int index;  // within the video's prediction list for this class
  };
  std::vector<Pred> preds;                          // sorted by score desc
  std::vector<std::vector<std::vector<double>>> iou;  // [video][pred][gt]
  std::vector<int> gt_count_per_video;
  int64_t total_gt = 0;
};

// 101-point interpolated AP from (cumTP, cumFP) in ranked order.
double interpolated_ap(const std::vector<int>& tp_flags, int64_t total_gt) {
  if (total_gt == 0) return -1.0;
  std::vector<double> recall, precision;
  int64_t tp = 0, fp = 0;
  for (int flag : tp_flags) {
    if (flag) ++tp; else ++fp;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  // Precision envelope from the right.
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
    precision[static_cast<size_t>(i)] =
        std::max(precision[static_cast<size_t>(i)], precision[static_cast<size_t>(i) + 1]);
  }
  double ap = 0.0;
  size_t ri = 0;
  for (int k = 0; k <= 100; ++k) {
    double r = k / 100.0;
    while (ri < recall.size() && recall[ri] < r) ++ri;
    ap += ri < precision.size() ? precision[ri] : 0.0;
  }
  return ap / 101.0;
}

// Greedy score-ordered matching at one threshold. Returns the TP flag per
// ranked prediction; match_counts collects matched GT totals.
std::vector<int> greedy_match(const ClassEval& ce, double threshold, int max_per_video,
                              int64_t* matched_out) {
  std::vector<int> flags;
  std::vector<std::vector<bool>> gt_used(ce.iou.size());
  std::vector<int> used_per_video(ce.iou.size(), 0);
  for (size_t v = 0; v < ce.iou.size(); ++v) {
    gt_used[v].assign(static_cast<size_t>(ce.gt_count_per_video[v]), false);
  }
  int64_t matched = 0;
  for (const ClassEval::Pred& p : ce.preds) {
    if (max_per_video > 0 && used_per_video[static_cast<size_t>(p.video)] >= max_per_video) {
      continue;  // detections beyond the per-video budget are ignored
    }
    if (max_per_video > 0) ++used_per_video[static_cast<size_t>(p.video)];
    const auto& ious = ce.iou[static_cast<size_t>(p.video)][static_cast<size_t>(p.index)];
    int best_gt = -1;
    double best_iou = threshold;
    for (size_t g = 0; g < ious.size(); ++g) {
      if (gt_used[static_cast<size_t>(p.video)][g]) continue;
      if (ious[g] >= best_iou) {
        best_iou = ious[g];
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      gt_used[static_cast<size_t>(p.video)][static_cast<size_t>(best_gt)] = true;
      flags.push_back(1);
      ++matched;
    } else {
      flags.push_back(0);
    }
  }
  if (matched_out) *matched_out = matched;
  return flags;
}

}  // namespace

bool EvalResult::ap_monotone_in_threshold(double tol) const {
  for (size_t i = 1; i < ap_per_threshold.size(); ++i) {
    if (ap_per_threshold[i] > ap_per_threshold[i - 1] + tol) return false;
  }
  return true;
}

json EvalResult::to_json() const {
  return {{"mAP", mAP},
          {"AP50", ap50},
          {"AP75", ap75},
          {"AR1", ar1},
          {"AR10", ar10},
          {"per_class_ap", per_class_ap},
          {"ap_per_threshold", ap_per_threshold},
          {"iou_thresholds", iou_thresholds},
          {"matched", matched},
          {"missed", missed},
          {"false_positives", false_positives}};
}

EvalResult video_map(const std::vector<PredTrack>& preds, const std::vector<GtTrack>& gts,
                     int num_classes, const std::vector<double>& thresholds) {
  // Group by video (clip_id) preserving first-seen order for determinism.
  std::vector<std::string> videos;
  std::map<std::string, int> video_index;
  auto vid = [&](const std::string& id) {
    auto it = video_index.find(id);
    if (it != video_index.end()) return it->second;
    int idx = static_cast<int>(videos.size());
    videos.push_back(id);
    video_index[id] = idx;
    return idx;
  };
  for (const GtTrack& g : gts) vid(g.clip_id);
  for (const PredTrack& p : preds) vid(p.clip_id);
  int V = static_cast<int>(videos.size());

  std::vector<ClassEval> evals(static_cast<size_t>(num_classes));
  for (ClassEval& ce : evals) {
    ce.iou.resize(static_cast<size_t>(V));
    ce.gt_count_per_video.assign(static_cast<size_t>(V), 0);
  }

  std::vector<std::vector<const GtTrack*>> gt_by_vc(static_cast<size_t>(num_classes * V));
  for (const GtTrack& g : gts) {
    if (g.class_id < 0 || g.class_id >= num_classes) {
      throw ValidationError("video_map: ground-truth class out of range");
    }
    int v = vid(g.clip_id);
    gt_by_vc[static_cast<size_t>(g.class_id * V + v)].push_back(&g);
    ++evals[static_cast<size_t>(g.class_id)].gt_count_per_video[static_cast<size_t>(v)];
    ++evals[static_cast<size_t>(g.class_id)].total_gt;
  }

  for (const PredTrack& p : preds) {
    if (p.class_id < 0 || p.class_id >= num_classes) {
      throw ValidationError("video_map: prediction class out of range");
    }
    int v = vid(p.clip_id);
    ClassEval& ce = evals[static_cast<size_t>(p.class_id)];
    const auto& gt_list = gt_by_vc[static_cast<size_t>(p.class_id * V + v)];
    std::vector<double> ious;
    ious.reserve(gt_list.size());
    for (const GtTrack* g : gt_list) ious.push_back(sequence_iou(p.masks, g->masks));
    int index = static_cast<int>(ce.iou[static_cast<size_t>(v)].size());
    ce.iou[static_cast<size_t>(v)].push_back(std::move(ious));
    ce.preds.push_back({p.score, v, index});
  }
  for (ClassEval& ce : evals) {
    std::stable_sort(ce.preds.begin(), ce.preds.end(),
                     [](const ClassEval::Pred& a, const ClassEval::Pred& b) {
                       return a.score > b.score;
                     });
  }

  EvalResult res;
  res.iou_thresholds = thresholds;
  res.per_class_ap.assign(static_cast<size_t>(num_classes), -1.0);
  res.ap_per_threshold.assign(thresholds.size(), 0.0);

  std::vector<double> class_ap_sum(static_cast<size_t>(num_classes), 0.0);
  std::vector<double> recall1_sum, recall10_sum;
  int classes_with_gt = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (evals[static_cast<size_t>(c)].total_gt > 0) ++classes_with_gt;
  }

  double ar1_acc = 0.0, ar10_acc = 0.0;
  for (size_t ti = 0; ti < thresholds.size(); ++ti) {
    double ap_acc = 0.0;
    for (int c = 0; c < num_classes; ++c) {
      ClassEval& ce = evals[static_cast<size_t>(c)];
      if (ce.total_gt == 0) continue;
      int64_t matched = 0;
      std::vector<int> flags = greedy_match(ce, thresholds[ti], 0, &matched);
      double ap = interpolated_ap(flags, ce.total_gt);
      ap_acc += ap;
      class_ap_sum[static_cast<size_t>(c)] += ap;

      int64_t m1 = 0, m10 = 0;
      greedy_match(ce, thresholds[ti], 1, &m1);
      greedy_match(ce, thresholds[ti], 10, &m10);
      ar1_acc += static_cast<double>(m1) / static_cast<double>(ce.total_gt);
      ar10_acc += static_cast<double>(m10) / static_cast<double>(ce.total_gt);

      if (std::fabs(thresholds[ti] - 0.5) < 1e-12) {
        res.matched += matched;
        res.missed += ce.total_gt - matched;
        res.false_positives += static_cast<int64_t>(flags.size()) - matched;
        res.ap50 += ap / classes_with_gt;
      }
      if (std::fabs(thresholds[ti] - 0.75) < 1e-12) res.ap75 += ap / classes_with_gt;
    }
    res.ap_per_threshold[ti] = classes_with_gt > 0 ? ap_acc / classes_with_gt : 0.0;
  }

  if (classes_with_gt > 0) {
    double total = 0.0;
    for (double v : res.ap_per_threshold) total += v;
    res.mAP = total / static_cast<double>(thresholds.size());
    res.ar1 = ar1_acc / (classes_with_gt * static_cast<double>(thresholds.size()));
    res.ar10 = ar10_acc / (classes_with_gt * static_cast<double>(thresholds.size()));
    for (int c = 0; c < num_classes; ++c) {
      if (evals[static_cast<size_t>(c)].total_gt > 0) {
        res.per_class_ap[static_cast<size_t>(c)] =
            class_ap_sum[static_cast<size_t>(c)] / static_cast<double>(thresholds.size());
      }
    }
  }
  return res;
}

json SimilarityHistogram::to_json() const {
  return {{"bins", bins}, {"mean", mean}, {"count", count}, {"range", {-1.0, 1.0}}};
}

SimilarityHistogram similarity_histogram(const model::VisModel& m,
                                         const std::vector<data::VideoClip>& clips,
                                         const SimilarityOptions& opts) {
  SimilarityHistogram hist;
  hist.bins.assign(static_cast<size_t>(opts.bins), 0);
  RngStream rng = RngStream(opts.seed).fork(0x5151);

  std::vector<size_t> order(clips.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  size_t take = std::min(order.size(), static_cast<size_t>(opts.num_videos));

  double sum = 0.0;
  for (size_t oi = 0; oi < take; ++oi) {
    const data::VideoClip& clip = clips[order[oi]];
    int T = clip.num_frames();
    // Matched query embedding per (track, frame).
    std::map<std::pair<int, int>, nn::Tensor> matched;
    for (int t = 0; t < T; ++t) {
      std::vector<int> cls;
      std::vector<data::Box> boxes;
      std::vector<int> ids;
      for (const data::InstanceTrack& tr : clip.instances) {
        if (!tr.visible[static_cast<size_t>(t)]) continue;
        cls.push_back(tr.class_id);
        boxes.push_back(tr.boxes[static_cast<size_t>(t)]);
        ids.push_back(tr.instance_id);
      }
      if (cls.empty()) continue;
      model::FrameOutputs out =
          m.forward_detached(model::frame_to_tensor(clip.frames[static_cast<size_t>(t)]));
      qfa::CostMatrix cm =
          qfa::cost_matrix(out.class_logits, out.boxes, cls, boxes, opts.lambda_b);
      qfa::Assignment a = qfa::match(cm.S, qfa::MatchMode::Hungarian);
      for (size_t mi = 0; mi < ids.size(); ++mi) {
        nn::Tensor e({1, static_cast<int>(out.embeddings.cols())});
        e.vec() = out.embeddings.mat().row(a.sigma[mi]);
        matched[{ids[mi], t}] = e;
      }
    }
    // Up to pairs_per_instance random frame pairs per instance.
    for (const data::InstanceTrack& tr : clip.instances) {
      std::vector<int> frames;
      for (int t = 0; t < T; ++t) {
        if (matched.count({tr.instance_id, t})) frames.push_back(t);
      }
      if (frames.size() < 2) continue;  // instance visible in < 2 frames
      for (int p = 0; p < opts.pairs_per_instance; ++p) {
        int i = static_cast<int>(rng.randint(static_cast<int64_t>(frames.size())));
        int j = static_cast<int>(rng.randint(static_cast<int64_t>(frames.size()) - 1));
        if (j >= i) ++j;
        const nn::Tensor& a = matched[{tr.instance_id, frames[static_cast<size_t>(i)]}];
        const nn::Tensor& b = matched[{tr.instance_id, frames[static_cast<size_t>(j)]}];
        double cos = (a.vec().array() * b.vec().array()).sum();
        cos = std::clamp(cos, -1.0, 1.0);
        int bin = std::min(opts.bins - 1,
                           static_cast<int>((cos + 1.0) / 2.0 * opts.bins));
        ++hist.bins[static_cast<size_t>(bin)];
        sum += cos;
        ++hist.count;
      }
    }
  }
  hist.mean = hist.count > 0 ? sum / static_cast<double>(hist.count) : 0.0;
  return hist;
}

}  // namespace ookd::evalkit
