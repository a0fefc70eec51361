#include "ookd/tracker.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "ookd/qfa.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ookd::track {

nlohmann::json TrackerConfig::to_json() const {
  return {{"conf_threshold", conf_threshold},
          {"spawn_threshold", spawn_threshold},
          {"momentum", momentum},
          {"retire_after", retire_after}};
}

TrackerConfig TrackerConfig::from_json(const nlohmann::json& j) {
  TrackerConfig c;
  c.conf_threshold = j.at("conf_threshold").get<double>();
  c.spawn_threshold = j.at("spawn_threshold").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.retire_after = j.at("retire_after").get<int>();
  return c;
}

nn::Tensor upsample_bilinear(const nn::Tensor& grid, int factor) {
  int h = grid.dim(0), w = grid.dim(1);
  int oh = h * factor, ow = w * factor;
  nn::Tensor out({oh, ow});
  for (int y = 0; y < oh; ++y) {
    double sy = (y + 0.5) / factor - 0.5;
    int y0 = static_cast<int>(std::floor(sy));
    double fy = sy - y0;
    int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
    for (int x = 0; x < ow; ++x) {
      double sx = (x + 0.5) / factor - 0.5;
      int x0 = static_cast<int>(std::floor(sx));
      double fx = sx - x0;
      int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
      out.at(y, x) = grid.at(y0c, x0c) * (1 - fy) * (1 - fx) +
                     grid.at(y0c, x1c) * (1 - fy) * fx +
                     grid.at(y1c, x0c) * fy * (1 - fx) + grid.at(y1c, x1c) * fy * fx;
    }
  }
  return out;
}

std::vector<Detection> detect(const model::FrameOutputs& out, int num_classes,
                              double conf_threshold, int frame_h, int frame_w) {
  int N = static_cast<int>(out.class_logits.rows());
  std::vector<Detection> dets;
  for (int n = 0; n < N; ++n) {
    double mx = -1e300;
    for (int c = 0; c <= num_classes; ++c) mx = std::max(mx, out.class_logits.at(n, c));
    double z = 0.0;
    for (int c = 0; c <= num_classes; ++c) z += std::exp(out.class_logits.at(n, c) - mx);
    int best = 0;
    double best_p = -1.0;
    for (int c = 0; c < num_classes; ++c) {  // exclude the no-object slot
      double p = std::exp(out.class_logits.at(n, c) - mx) / z;
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    if (best_p < conf_threshold) continue;
    Detection d;
    d.query_index = n;
    d.class_id = best;
    d.score = best_p;
    d.box = {out.boxes.at(n, 0), out.boxes.at(n, 1), out.boxes.at(n, 2), out.boxes.at(n, 3)};
    d.embedding = nn::Tensor({1, static_cast<int>(out.embeddings.cols())});
    d.embedding.vec() = out.embeddings.mat().row(n);
    dets.push_back(std::move(d));
  }
  // Highest score first; ties keep query order.
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });

  // Rasterize masks in score order; earlier (higher-scoring) detections claim
  // contested pixels.
  int factor = frame_h / out.mask_h;
  data::Mask claimed(frame_h, frame_w);
  for (Detection& d : dets) {
    nn::Tensor grid({out.mask_h, out.mask_w});
    for (int p = 0; p < out.mask_h * out.mask_w; ++p) grid[p] = out.mask_logits.at(d.query_index, p);
    nn::Tensor up = upsample_bilinear(grid, factor);
    d.mask = data::Mask(frame_h, frame_w);
    for (int y = 0; y < frame_h; ++y) {
      for (int x = 0; x < frame_w; ++x) {
        if (up.at(y, x) > 0.0 && !claimed.at(y, x)) {
          d.mask.at(y, x) = 1;
          claimed.at(y, x) = 1;
        }
      }
    }
  }
  return dets;
}

std::vector<int> MemoryBank::assign_ids(const std::vector<Detection>& detections,
                                        int frame_index) {
  int D = static_cast<int>(detections.size());
  int M = static_cast<int>(entries_.size());
  std::vector<int> ids(static_cast<size_t>(D), -1);

  if (D > 0 && M > 0) {
    // Cosine similarity; both sides are unit norm.
    nn::Tensor sim({D, M});
    for (int d = 0; d < D; ++d) {
      for (int m = 0; m < M; ++m) {
        sim.at(d, m) = (detections[static_cast<size_t>(d)].embedding.vec().array() *
                        entries_[static_cast<size_t>(m)].embedding.vec().array())
                           .sum();
      }
    }
    // Hungarian on cost = 1 - sim with the smaller side as columns.
    std::vector<std::pair<int, int>> pairs;  // (detection, entry)
    if (D >= M) {
      nn::Tensor cost({D, M});
      for (int64_t i = 0; i < cost.numel(); ++i) cost[i] = 1.0 - sim[i];
      std::vector<int> sigma = qfa::hungarian_min_cost(cost);
      for (int m = 0; m < M; ++m) pairs.emplace_back(sigma[static_cast<size_t>(m)], m);
    } else {
      nn::Tensor cost({M, D});
      for (int d = 0; d < D; ++d) {
        for (int m = 0; m < M; ++m) cost.at(m, d) = 1.0 - sim.at(d, m);
      }
      std::vector<int> sigma = qfa::hungarian_min_cost(cost);
      for (int d = 0; d < D; ++d) pairs.emplace_back(d, sigma[static_cast<size_t>(d)]);
    }
    for (auto [d, m] : pairs) {
      if (sim.at(d, m) < cfg_.spawn_threshold) continue;
      MemoryEntry& e = entries_[static_cast<size_t>(m)];
      ids[static_cast<size_t>(d)] = e.instance_id;
      e.embedding.vec() = cfg_.momentum * e.embedding.vec() +
                          (1.0 - cfg_.momentum) * detections[static_cast<size_t>(d)].embedding.vec();
      double n = e.embedding.vec().norm();
      if (n > 1e-12) e.embedding.vec() /= n;
      e.last_seen = frame_index;
    }
  }

  for (int d = 0; d < D; ++d) {
    if (ids[static_cast<size_t>(d)] >= 0) continue;
    MemoryEntry e;
    e.instance_id = next_id_++;
    e.embedding = detections[static_cast<size_t>(d)].embedding.clone();
    double n = e.embedding.vec().norm();
    if (n > 1e-12) e.embedding.vec() /= n;
    e.last_seen = frame_index;
    ids[static_cast<size_t>(d)] = e.instance_id;
    entries_.push_back(std::move(e));
  }

  // Retire stale entries; ids are never reused.
  std::vector<MemoryEntry> kept;
  for (MemoryEntry& e : entries_) {
    if (frame_index - e.last_seen <= cfg_.retire_after) kept.push_back(std::move(e));
  }
  entries_ = std::move(kept);
  return ids;
}

std::vector<TrackResult> track_video(const data::VideoClip& clip, const model::VisModel& m,
                                     const TrackerConfig& cfg) {
  int T = clip.num_frames();
  MemoryBank bank(cfg);
  struct Accum {
    std::vector<data::Mask> masks;
    std::map<int, double> class_votes;  // class -> summed score
    std::map<int, std::vector<double>> class_scores;
  };
  std::map<int, Accum> tracks;

  for (int t = 0; t < T; ++t) {
    model::FrameOutputs out =
        m.forward_detached(model::frame_to_tensor(clip.frames[static_cast<size_t>(t)]));
    std::vector<Detection> dets =
        detect(out, m.config().num_classes, cfg.conf_threshold, clip.height, clip.width);
    std::vector<int> ids = bank.assign_ids(dets, t);
    for (size_t d = 0; d < dets.size(); ++d) {
      Accum& acc = tracks[ids[d]];
      if (acc.masks.empty()) acc.masks.assign(static_cast<size_t>(T), data::Mask(clip.height, clip.width));
      acc.masks[static_cast<size_t>(t)] = dets[d].mask;
      acc.class_votes[dets[d].class_id] += dets[d].score;
      acc.class_scores[dets[d].class_id].push_back(dets[d].score);
    }
  }

  std::vector<TrackResult> out;
  for (auto& [id, acc] : tracks) {
    TrackResult tr;
    tr.instance_id = id;
    // Score-weighted vote over frames; ties resolve to the lower class id.
    double best_vote = -1.0;
    for (const auto& [cls, vote] : acc.class_votes) {
      if (vote > best_vote) {
        best_vote = vote;
        tr.class_id = cls;
      }
    }
    const auto& scores = acc.class_scores[tr.class_id];
    double s = 0.0;
    for (double v : scores) s += v;
    tr.score = scores.empty() ? 0.0 : s / static_cast<double>(scores.size());
    tr.masks = std::move(acc.masks);
    out.push_back(std::move(tr));
  }
  return out;
}

void save_results(const std::string& dir, const data::VideoClip& clip,
                  const std::vector<TrackResult>& tracks) {
  fs::create_directories(dir);
  json j = {{"clip_id", clip.clip_id},
            {"num_frames", clip.num_frames()},
            {"height", clip.height},
            {"width", clip.width},
            {"tracks", json::array()}};
  for (const TrackResult& tr : tracks) {
    json masks = json::array();
    for (const data::Mask& m : tr.masks) {
      masks.push_back({{"size", {m.height, m.width}}, {"counts", data::rle_encode(m)}});
    }
    j["tracks"].push_back({{"instance_id", tr.instance_id},
                           {"class_id", tr.class_id},
                           {"score", tr.score},
                           {"masks", masks}});
  }
  std::ofstream f(fs::path(dir) / (clip.clip_id + ".json"));
  f << j.dump() << "\n";
}

std::vector<TrackResult> load_results(const std::string& path, int* num_frames,
                                      std::string* clip_id) {
  std::ifstream f(path);
  if (!f) throw IoError("load_results: cannot open " + path);
  json j;
  f >> j;
  if (num_frames) *num_frames = j.at("num_frames").get<int>();
  if (clip_id) *clip_id = j.at("clip_id").get<std::string>();
  std::vector<TrackResult> out;
  for (const json& jt : j.at("tracks")) {
    TrackResult tr;
    tr.instance_id = jt.at("instance_id").get<int>();
    tr.class_id = jt.at("class_id").get<int>();
    tr.score = jt.at("score").get<double>();
    for (const json& jm : jt.at("masks")) {
      auto size = jm.at("size").get<std::vector<int>>();
      tr.masks.push_back(
          data::rle_decode(size.at(0), size.at(1), jm.at("counts").get<std::vector<int>>()));
    }
    out.push_back(std::move(tr));
  }
  return out;
}

}  // namespace ookd::track
