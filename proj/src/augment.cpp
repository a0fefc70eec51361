#include "ookd/augment.hpp"

#include <algorithm>
#include <cmath>

namespace ookd::augment {

using data::Box;
using data::InstanceTrack;
using data::Mask;
using data::VideoClip;

std::vector<double> paste_probabilities(const std::vector<double>& p, double k) {
  if (p.empty()) throw ValidationError("paste_probabilities: empty frequency vector");
  if (k < 0.0 || k > 1.0) {
    throw ValidationError("paste_probabilities: k must be in [0, 1], got " +
                          std::to_string(k));
  }
  for (double v : p) {
    if (v < 0.0 || v > 1.0) {
      throw ValidationError("paste_probabilities: frequencies must be in [0, 1]");
    }
  }
  double pmax = *std::max_element(p.begin(), p.end());
  double pmin = *std::min_element(p.begin(), p.end());
  std::vector<double> ps(p.size(), 0.0);
  if (pmax == pmin) return ps;
  for (size_t i = 0; i < p.size(); ++i) {
    ps[i] = k * (pmax - p[i]) / (pmax - pmin);
  }
  return ps;
}

ClassStats make_class_stats(const std::vector<double>& p, double k, double minor_threshold) {
  ClassStats st;
  st.p = p;
  st.p_s = paste_probabilities(p, k);
  st.k = k;
  st.minor_threshold = minor_threshold;
  return st;
}

std::vector<SourceRef> select_minor_sources(const std::vector<VideoClip>& clips,
                                            const ClassStats& stats) {
  std::vector<SourceRef> out;
  for (size_t ci = 0; ci < clips.size(); ++ci) {
    const VideoClip& clip = clips[ci];
    for (size_t ti = 0; ti < clip.instances.size(); ++ti) {
      int cls = clip.instances[ti].class_id;
      if (cls >= 0 && cls < stats.num_classes() &&
          stats.p[static_cast<size_t>(cls)] < stats.minor_threshold) {
        out.push_back({static_cast<int>(ci), static_cast<int>(ti)});
      }
    }
  }
  return out;
}

namespace {

constexpr int64_t kMinVisibleArea = 16;

// Center of the union of the track's visible masks, in source pixels.
std::array<double, 2> track_center(const InstanceTrack& tr) {
  int min_x = 1 << 30, max_x = -1, min_y = 1 << 30, max_y = -1;
  for (const Mask& m : tr.masks) {
    for (int y = 0; y < m.height; ++y) {
      for (int x = 0; x < m.width; ++x) {
        if (m.at(y, x)) {
          min_x = std::min(min_x, x);
          max_x = std::max(max_x, x);
          min_y = std::min(min_y, y);
          max_y = std::max(max_y, y);
        }
      }
    }
  }
  return {(min_x + max_x + 1) / 2.0, (min_y + max_y + 1) / 2.0};
}

void refresh_track_frame(InstanceTrack& tr, int t) {
  const Mask& m = tr.masks[static_cast<size_t>(t)];
  if (m.empty()) {
    tr.visible[static_cast<size_t>(t)] = 0;
    tr.boxes[static_cast<size_t>(t)] = Box{0, 0, 0, 0};
  } else {
    tr.visible[static_cast<size_t>(t)] = 1;
    tr.boxes[static_cast<size_t>(t)] = data::box_from_mask(m);
  }
}

}  // namespace

VideoClip paste_at(const VideoClip& target, const VideoClip& source_clip, int source_track,
                   int dx, int dy, PasteOutcome* outcome) {
  PasteOutcome local;
  if (source_track < 0 || source_track >= static_cast<int>(source_clip.instances.size())) {
    throw ValidationError("paste_at: source track index out of range");
  }
  const InstanceTrack& src = source_clip.instances[static_cast<size_t>(source_track)];

  bool any_source = false;
  for (const Mask& m : src.masks) any_source = any_source || !m.empty();
  if (!any_source) {
    local.skipped_empty = true;
    if (outcome) *outcome = local;
    return target;
  }

  const int Tt = target.num_frames();
  const int Ts = static_cast<int>(src.masks.size());
  const int H = target.height, W = target.width;

  // Precompute pasted masks; abort before mutating anything if too small.
  std::vector<Mask> pasted(static_cast<size_t>(Tt));
  int64_t max_area = 0;
  for (int t = 0; t < Tt; ++t) {
    int st = std::min(t, Ts - 1);
    const Mask& sm = src.masks[static_cast<size_t>(st)];
    Mask pm(H, W);
    for (int y = 0; y < sm.height; ++y) {
      for (int x = 0; x < sm.width; ++x) {
        if (!sm.at(y, x)) continue;
        int ty = y + dy, tx = x + dx;
        if (ty >= 0 && ty < H && tx >= 0 && tx < W) pm.at(ty, tx) = 1;
      }
    }
    max_area = std::max(max_area, pm.area());
    pasted[static_cast<size_t>(t)] = std::move(pm);
  }
  if (max_area < kMinVisibleArea) {
    local.aborted_small = true;
    if (outcome) *outcome = local;
    return target;
  }

  VideoClip out = target;
  int next_id = 0;
  for (const InstanceTrack& tr : out.instances) next_id = std::max(next_id, tr.instance_id + 1);

  for (int t = 0; t < Tt; ++t) {
    int st = std::min(t, Ts - 1);
    const Mask& pm = pasted[static_cast<size_t>(t)];
    if (pm.empty()) continue;
    const Image& sframe = source_clip.frames[static_cast<size_t>(st)];
    Image& tframe = out.frames[static_cast<size_t>(t)];
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        if (!pm.at(y, x)) continue;
        for (int c = 0; c < 3; ++c) tframe.at(y, x, c) = sframe.at(y - dy, x - dx, c);
      }
    }
    for (InstanceTrack& tr : out.instances) {
      Mask& m = tr.masks[static_cast<size_t>(t)];
      bool changed = false;
      for (size_t p = 0; p < m.bits.size(); ++p) {
        if (m.bits[p] && pm.bits[p]) {
          m.bits[p] = 0;
          changed = true;
        }
      }
      if (changed) refresh_track_frame(tr, t);
    }
  }

  InstanceTrack pasted_track;
  pasted_track.instance_id = next_id;
  pasted_track.class_id = src.class_id;
  for (int t = 0; t < Tt; ++t) {
    pasted_track.masks.push_back(std::move(pasted[static_cast<size_t>(t)]));
    pasted_track.boxes.push_back(Box{0, 0, 0, 0});
    pasted_track.visible.push_back(0);
  }
  for (int t = 0; t < Tt; ++t) refresh_track_frame(pasted_track, t);
  out.instances.push_back(std::move(pasted_track));

  local.pasted = true;
  if (outcome) *outcome = local;
  return out;
}

VideoClip minor_paste(const VideoClip& target, const VideoClip& source_clip,
                      int source_track, double paste_prob, RngStream& rng,
                      PasteOutcome* outcome) {
  if (!rng.bernoulli(paste_prob)) {
    if (outcome) *outcome = PasteOutcome{};
    return target;
  }
  const InstanceTrack& src = source_clip.instances.at(static_cast<size_t>(source_track));
  bool any_source = false;
  for (const Mask& m : src.masks) any_source = any_source || !m.empty();
  if (!any_source) {
    if (outcome) *outcome = PasteOutcome{false, false, true};
    return target;
  }
  auto center = track_center(src);
  double ax = rng.uniform(0.15, 0.85) * target.width;
  double ay = rng.uniform(0.15, 0.85) * target.height;
  int dx = static_cast<int>(std::lround(ax - center[0]));
  int dy = static_cast<int>(std::lround(ay - center[1]));
  return paste_at(target, source_clip, source_track, dx, dy, outcome);
}

}  // namespace ookd::augment
