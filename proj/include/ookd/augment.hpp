#pragma once

#include <vector>

#include "ookd/dataset.hpp"

namespace ookd::augment {

struct ClassStats {
  std::vector<double> p;    // per-class instance frequency
  std::vector<double> p_s;  // per-class paste probability
  double k = 0.7;
  double minor_threshold = 0.10;

  int num_classes() const { return static_cast<int>(p.size()); }
};

// p_s[c] = k * (max(p) - p[c]) / (max(p) - min(p)); all zeros when max == min
// (a balanced dataset needs no rebalancing).
std::vector<double> paste_probabilities(const std::vector<double>& p, double k);

ClassStats make_class_stats(const std::vector<double>& p, double k = 0.7,
                            double minor_threshold = 0.10);

struct SourceRef {
  int clip_index = 0;
  int track_index = 0;
};

// All (clip, instance) pairs whose class frequency is below minor_threshold.
std::vector<SourceRef> select_minor_sources(const std::vector<data::VideoClip>& clips,
                                            const ClassStats& stats);

struct PasteOutcome {
  bool pasted = false;
  bool aborted_small = false;  // visible area under 16 px on every frame
  bool skipped_empty = false;  // source mask empty on all frames
};

// Unconditional paste of source track at integer offset (dx, dy); source
// frames clamp to the last one when the source is shorter and truncate when
// longer. Rewrites target pixels, subtracts overlap from existing masks,
// and appends the new track. Returns the outcome (no-op when aborted).
data::VideoClip paste_at(const data::VideoClip& target, const data::VideoClip& source_clip,
                         int source_track, int dx, int dy, PasteOutcome* outcome = nullptr);

// Bernoulli(paste_prob) gate plus a random anchor offset, then paste_at.
data::VideoClip minor_paste(const data::VideoClip& target,
                            const data::VideoClip& source_clip, int source_track,
                            double paste_prob, RngStream& rng,
                            PasteOutcome* outcome = nullptr);

}  // namespace ookd::augment
