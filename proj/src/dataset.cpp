#include "ookd/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace ookd::data {

std::vector<int> rle_encode(const Mask& m) {
  std::vector<int> counts;
  uint8_t current = 0;  // counts-first: leading zero run, possibly empty
  int run = 0;
  for (uint8_t b : m.bits) {
    if (b == current) {
      ++run;
    } else {
      counts.push_back(run);
      current = b;
      run = 1;
    }
  }
  counts.push_back(run);
  return counts;
}

Mask rle_decode(int height, int width, const std::vector<int>& counts) {
  Mask m(height, width);
  int64_t total = static_cast<int64_t>(height) * width;
  int64_t pos = 0;
  uint8_t value = 0;
  for (int c : counts) {
    if (c < 0 || pos + c > total) {
      throw IoError("rle_decode: counts exceed mask size");
    }
    if (value) std::fill(m.bits.begin() + pos, m.bits.begin() + pos + c, uint8_t{1});
    pos += c;
    value ^= 1;
  }
  if (pos != total) throw IoError("rle_decode: counts do not cover mask");
  return m;
}

Box box_from_mask(const Mask& m) {
  int min_x = m.width, max_x = -1, min_y = m.height, max_y = -1;
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
  if (max_x < 0) return {0.0, 0.0, 0.0, 0.0};
  double x1 = min_x, x2 = max_x + 1.0, y1 = min_y, y2 = max_y + 1.0;
  double W = m.width, H = m.height;
  return {(x1 + x2) / 2.0 / W, (y1 + y2) / 2.0 / H, (x2 - x1) / W, (y2 - y1) / H};
}

void ClipSpec::validate() const {
  if (num_frames < 2) throw ValidationError("ClipSpec.num_frames: must be >= 2");
  if (height < 32) throw ValidationError("ClipSpec.height: must be >= 32");
  if (width < 32) throw ValidationError("ClipSpec.width: must be >= 32");
  if (palette.empty()) throw ValidationError("ClipSpec.palette: must be non-empty");
  double wsum = 0.0;
  for (const auto& c : palette) {
    if (c.weight < 0.0) throw ValidationError("ClipSpec.palette: negative weight for " + c.name);
    wsum += c.weight;
  }
  if (std::fabs(wsum - 1.0) > 1e-9) {
    throw ValidationError("ClipSpec.palette: weights must sum to 1, got " +
                          std::to_string(wsum));
  }
  if (min_instances < 1) throw ValidationError("ClipSpec.min_instances: must be >= 1");
  if (max_instances < min_instances) {
    throw ValidationError("ClipSpec.max_instances: must be >= min_instances");
  }
  if (motion.max_translation < 0.0) {
    throw ValidationError("ClipSpec.motion.max_translation: must be >= 0");
  }
  if (motion.scale_jitter < 0.0 || motion.scale_jitter >= 0.5) {
    throw ValidationError("ClipSpec.motion.scale_jitter: must be in [0, 0.5)");
  }
}

std::vector<ShapeClass> default_palette() {
  return {
      {"red_ellipse", "ellipse", {230, 60, 50}, 0.34},
      {"green_rectangle", "rectangle", {60, 200, 80}, 0.24},
      {"blue_triangle", "triangle", {70, 110, 235}, 0.16},
      {"yellow_ring", "ring", {235, 200, 60}, 0.10},
      {"magenta_star", "star", {215, 70, 200}, 0.07},
      {"cyan_rectangle", "rectangle", {70, 215, 215}, 0.05},
      {"white_triangle", "triangle", {235, 235, 235}, 0.04},
  };
}

namespace {

enum class Kind { Ellipse, Rectangle, Triangle, Ring, Star };

Kind parse_kind(const std::string& s) {
  if (s == "ellipse") return Kind::Ellipse;
  if (s == "rectangle") return Kind::Rectangle;
  if (s == "triangle") return Kind::Triangle;
  if (s == "ring") return Kind::Ring;
  if (s == "star") return Kind::Star;
  throw ValidationError("ClipSpec.palette: unknown shape kind '" + s + "'");
}

// Even-odd point-in-polygon on normalized local coordinates.
bool in_polygon(double nx, double ny, const std::vector<std::array<double, 2>>& poly) {
  bool inside = false;
  size_t n = poly.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    double xi = poly[i][0], yi = poly[i][1];
    double xj = poly[j][0], yj = poly[j][1];
    bool cross = ((yi > ny) != (yj > ny)) &&
                 (nx < (xj - xi) * (ny - yi) / (yj - yi) + xi);
    if (cross) inside = !inside;
  }
  return inside;
}

std::vector<std::array<double, 2>> triangle_poly() {
  std::vector<std::array<double, 2>> p;
  for (int k = 0; k < 3; ++k) {
    double a = M_PI / 2.0 + 2.0 * M_PI * k / 3.0;
    p.push_back({std::cos(a), std::sin(a)});
  }
  return p;
}

std::vector<std::array<double, 2>> star_poly() {
  std::vector<std::array<double, 2>> p;
  for (int k = 0; k < 10; ++k) {
    double r = (k % 2 == 0) ? 1.0 : 0.45;
    double a = M_PI / 2.0 + M_PI * k / 5.0;
    p.push_back({r * std::cos(a), r * std::sin(a)});
  }
  return p;
}

struct InstanceState {
  Kind kind;
  int class_id;
  double rx, ry;        // base radii, pixels
  double cx, cy;        // center, pixels
  double vx, vy;        // velocity, pixels/frame
  double angle, omega;  // rotation
  double jitter_freq, jitter_phase;
  std::array<double, 3> color;  // base RGB after class/instance jitter
};

bool inside_shape(const InstanceState& s, double scale, double px, double py) {
  double dx = px - s.cx, dy = py - s.cy;
  double ca = std::cos(s.angle), sa = std::sin(s.angle);
  double lx = dx * ca + dy * sa;
  double ly = -dx * sa + dy * ca;
  double nx = lx / (s.rx * scale), ny = ly / (s.ry * scale);
  switch (s.kind) {
    case Kind::Ellipse:
      return nx * nx + ny * ny <= 1.0;
    case Kind::Rectangle:
      return std::fabs(nx) <= 0.9 && std::fabs(ny) <= 0.9;
    case Kind::Triangle: {
      static const auto poly = triangle_poly();
      return in_polygon(nx, ny, poly);
    }
    case Kind::Ring: {
      double r2 = nx * nx + ny * ny;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case Kind::Star: {
      static const auto poly = star_poly();
      return in_polygon(nx, ny, poly);
    }
  }
  return false;
}

Mask rasterize(const InstanceState& s, double scale, int H, int W) {
  Mask m(H, W);
  double reach = std::max(s.rx, s.ry) * scale * 1.6 + 1.0;
  int y0 = std::max(0, static_cast<int>(std::floor(s.cy - reach)));
  int y1 = std::min(H - 1, static_cast<int>(std::ceil(s.cy + reach)));
  int x0 = std::max(0, static_cast<int>(std::floor(s.cx - reach)));
  int x1 = std::min(W - 1, static_cast<int>(std::ceil(s.cx + reach)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (inside_shape(s, scale, x + 0.5, y + 0.5)) m.at(y, x) = 1;
    }
  }
  return m;
}

uint8_t clamp_u8(double v) {
  return static_cast<uint8_t>(std::min(255.0, std::max(0.0, std::round(v))));
}

}  // namespace

VideoClip generate_clip(const ClipSpec& spec, uint64_t seed, std::string clip_id) {
  spec.validate();
  RngStream rng = RngStream(seed).fork(0x5e7a11);

  VideoClip clip;
  clip.clip_id = clip_id.empty() ? ("clip_" + std::to_string(seed)) : std::move(clip_id);
  clip.height = spec.height;
  clip.width = spec.width;

  const int T = spec.num_frames, H = spec.height, W = spec.width;
  int n_inst = spec.min_instances +
               static_cast<int>(rng.randint(spec.max_instances - spec.min_instances + 1));

  std::array<double, 3> bg;
  double bg_base = rng.uniform(22.0, 48.0);
  for (int c = 0; c < 3; ++c) bg[static_cast<size_t>(c)] = bg_base + rng.uniform(-6.0, 6.0);
  double illum_freq = rng.uniform(0.03, 0.12);
  double illum_phase = rng.uniform(0.0, 2.0 * M_PI);

  std::vector<std::array<double, 3>> class_jitter(spec.palette.size());
  for (auto& cj : class_jitter) {
    for (int c = 0; c < 3; ++c) cj[static_cast<size_t>(c)] = rng.uniform(0.9, 1.1);
  }

  std::vector<double> weights;
  for (const auto& p : spec.palette) weights.push_back(p.weight);

  std::vector<InstanceState> states;
  double max_scale = 1.0 + spec.motion.scale_jitter;
  for (int i = 0; i < n_inst; ++i) {
    InstanceState s;
    s.class_id = rng.sample_weighted(weights);
    const ShapeClass& sc = spec.palette[static_cast<size_t>(s.class_id)];
    s.kind = parse_kind(sc.kind);
    double base = rng.uniform(0.10, 0.22) * std::min(H, W);
    double aspect = rng.uniform(0.7, 1.3);
    s.rx = base * aspect;
    s.ry = base / aspect;
    double margin = spec.allow_entry_exit
                        ? 1.0
                        : std::max(s.rx, s.ry) * max_scale * 1.6 + 1.0;
    s.cx = rng.uniform(margin, W - margin);
    s.cy = rng.uniform(margin, H - margin);
    double dir = rng.uniform(0.0, 2.0 * M_PI);
    double speed = rng.uniform(0.3, 1.0) * spec.motion.max_translation;
    s.vx = speed * std::cos(dir);
    s.vy = speed * std::sin(dir);
    s.angle = rng.uniform(0.0, 2.0 * M_PI);
    s.omega = rng.uniform(-1.0, 1.0) * spec.motion.max_rotation;
    s.jitter_freq = rng.uniform(0.05, 0.2);
    s.jitter_phase = rng.uniform(0.0, 2.0 * M_PI);
    double brightness = rng.uniform(0.8, 1.2);
    for (int c = 0; c < 3; ++c) {
      s.color[static_cast<size_t>(c)] = sc.color[static_cast<size_t>(c)] *
                                        class_jitter[static_cast<size_t>(s.class_id)]
                                                    [static_cast<size_t>(c)] *
                                        brightness;
    }
    states.push_back(s);
  }

  clip.instances.resize(static_cast<size_t>(n_inst));
  for (int i = 0; i < n_inst; ++i) {
    clip.instances[static_cast<size_t>(i)].instance_id = i;
    clip.instances[static_cast<size_t>(i)].class_id = states[static_cast<size_t>(i)].class_id;
  }

  for (int t = 0; t < T; ++t) {
    double illum = 1.0 + spec.motion.color_drift *
                             std::sin(2.0 * M_PI * (illum_freq * t) + illum_phase);

    // Full (un-occluded) masks; later instances sit on top.
    std::vector<Mask> full(static_cast<size_t>(n_inst));
    for (int i = 0; i < n_inst; ++i) {
      InstanceState& s = states[static_cast<size_t>(i)];
      double scale = 1.0 + spec.motion.scale_jitter *
                               std::sin(2.0 * M_PI * (s.jitter_freq * t) + s.jitter_phase);
      full[static_cast<size_t>(i)] = rasterize(s, scale, H, W);
    }

    // Topmost-instance label per pixel; occluded pixels leave lower masks.
    std::vector<int> label(static_cast<size_t>(H) * W, -1);
    for (int i = 0; i < n_inst; ++i) {
      const Mask& m = full[static_cast<size_t>(i)];
      for (size_t p = 0; p < m.bits.size(); ++p) {
        if (m.bits[p]) label[p] = i;
      }
    }

    Image frame(H, W);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        int li = label[static_cast<size_t>(y) * W + x];
        for (int c = 0; c < 3; ++c) {
          double base = li < 0 ? bg[static_cast<size_t>(c)]
                               : states[static_cast<size_t>(li)].color[static_cast<size_t>(c)];
          frame.at(y, x, c) = clamp_u8(base * illum + rng.normal(0.0, 2.5));
        }
      }
    }
    clip.frames.push_back(std::move(frame));

    for (int i = 0; i < n_inst; ++i) {
      Mask vis(H, W);
      for (size_t p = 0; p < vis.bits.size(); ++p) {
        vis.bits[p] = (label[p] == i) ? 1 : 0;
      }
      InstanceTrack& tr = clip.instances[static_cast<size_t>(i)];
      bool v = !vis.empty();
      tr.boxes.push_back(v ? box_from_mask(vis) : Box{0, 0, 0, 0});
      tr.visible.push_back(v ? 1 : 0);
      tr.masks.push_back(std::move(vis));
    }

    // Advance motion; bounce at walls unless instances may leave the frame.
    for (int i = 0; i < n_inst; ++i) {
      InstanceState& s = states[static_cast<size_t>(i)];
      s.cx += s.vx;
      s.cy += s.vy;
      s.angle += s.omega;
      if (!spec.allow_entry_exit) {
        double margin = std::max(s.rx, s.ry) * max_scale * 1.6 + 1.0;
        if (margin * 2.0 < std::min(H, W)) {
          if (s.cx < margin) { s.cx = 2.0 * margin - s.cx; s.vx = -s.vx; }
          if (s.cx > W - margin) { s.cx = 2.0 * (W - margin) - s.cx; s.vx = -s.vx; }
          if (s.cy < margin) { s.cy = 2.0 * margin - s.cy; s.vy = -s.vy; }
          if (s.cy > H - margin) { s.cy = 2.0 * (H - margin) - s.cy; s.vy = -s.vy; }
        }
      }
    }
  }

  return clip;
}

DatasetStats compute_class_stats(const std::vector<VideoClip>& dataset, int num_classes) {
  if (dataset.empty()) throw ValidationError("compute_class_stats: empty dataset");
  DatasetStats st;
  st.counts.assign(static_cast<size_t>(num_classes), 0);
  int64_t total = 0;
  for (const VideoClip& clip : dataset) {
    for (const InstanceTrack& tr : clip.instances) {
      if (tr.class_id < 0 || tr.class_id >= num_classes) {
        throw ValidationError("compute_class_stats: class_id " +
                              std::to_string(tr.class_id) + " out of range in clip " +
                              clip.clip_id);
      }
      ++st.counts[static_cast<size_t>(tr.class_id)];
      ++total;
    }
  }
  if (total == 0) throw ValidationError("compute_class_stats: dataset has no instances");
  st.p.resize(st.counts.size());
  for (size_t i = 0; i < st.counts.size(); ++i) {
    st.p[i] = static_cast<double>(st.counts[i]) / static_cast<double>(total);
  }
  return st;
}

namespace {

json track_to_json(const InstanceTrack& tr) {
  json masks = json::array();
  for (const Mask& m : tr.masks) {
    masks.push_back({{"size", {m.height, m.width}}, {"counts", rle_encode(m)}});
  }
  json boxes = json::array();
  for (const Box& b : tr.boxes) boxes.push_back({b[0], b[1], b[2], b[3]});
  return {{"instance_id", tr.instance_id},
          {"class_id", tr.class_id},
          {"visible", tr.visible},
          {"boxes", boxes},
          {"masks", masks}};
}

InstanceTrack track_from_json(const json& j, const std::string& clip_id, int T) {
  InstanceTrack tr;
  tr.instance_id = j.at("instance_id").get<int>();
  tr.class_id = j.at("class_id").get<int>();
  const json& masks = j.at("masks");
  if (static_cast<int>(masks.size()) != T) {
    throw IoError("load_dataset: clip " + clip_id + " instance " +
                  std::to_string(tr.instance_id) + " has " + std::to_string(masks.size()) +
                  " masks, expected one per frame (" + std::to_string(T) +
                  "); first missing frame " + std::to_string(masks.size()));
  }
  for (const json& jm : masks) {
    auto size = jm.at("size").get<std::vector<int>>();
    tr.masks.push_back(rle_decode(size.at(0), size.at(1), jm.at("counts").get<std::vector<int>>()));
  }
  for (const json& jb : j.at("boxes")) {
    auto v = jb.get<std::vector<double>>();
    tr.boxes.push_back({v.at(0), v.at(1), v.at(2), v.at(3)});
  }
  tr.visible = j.at("visible").get<std::vector<uint8_t>>();
  if (static_cast<int>(tr.boxes.size()) != T || static_cast<int>(tr.visible.size()) != T) {
    throw IoError("load_dataset: clip " + clip_id + " instance " +
                  std::to_string(tr.instance_id) + " has inconsistent boxes/visible length");
  }
  return tr;
}

constexpr int kSchemaVersion = 1;

}  // namespace

void save_dataset(const Dataset& ds, const std::string& root) {
  fs::create_directories(fs::path(root) / "clips");
  fs::create_directories(fs::path(root) / "annotations");

  json classes = json::array();
  for (const ShapeClass& c : ds.classes) {
    classes.push_back({{"name", c.name},
                       {"kind", c.kind},
                       {"color", {c.color[0], c.color[1], c.color[2]}},
                       {"weight", c.weight}});
  }
  json meta = {{"schema_version", kSchemaVersion}, {"classes", classes}};
  std::ofstream mf(fs::path(root) / "meta.json");
  mf << meta.dump(2) << "\n";

  for (const VideoClip& clip : ds.clips) {
    fs::path cdir = fs::path(root) / "clips" / clip.clip_id;
    fs::create_directories(cdir);
    for (int t = 0; t < clip.num_frames(); ++t) {
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%04d.png", t);
      write_png((cdir / name).string(), clip.frames[static_cast<size_t>(t)]);
    }
    json ann = {{"schema_version", kSchemaVersion},
                {"clip_id", clip.clip_id},
                {"num_frames", clip.num_frames()},
                {"height", clip.height},
                {"width", clip.width},
                {"instances", json::array()}};
    for (const InstanceTrack& tr : clip.instances) {
      ann["instances"].push_back(track_to_json(tr));
    }
    std::ofstream af(fs::path(root) / "annotations" / (clip.clip_id + ".json"));
    af << ann.dump() << "\n";
  }
}

Dataset load_dataset(const std::string& root, std::vector<std::string>* warnings) {
  fs::path meta_path = fs::path(root) / "meta.json";
  if (!fs::exists(meta_path)) {
    throw IoError("load_dataset: missing " + meta_path.string());
  }
  Dataset ds;
  json meta;
  {
    std::ifstream mf(meta_path);
    mf >> meta;
  }
  for (const json& jc : meta.at("classes")) {
    ShapeClass c;
    c.name = jc.at("name").get<std::string>();
    c.kind = jc.at("kind").get<std::string>();
    auto col = jc.at("color").get<std::vector<int>>();
    c.color = {static_cast<uint8_t>(col.at(0)), static_cast<uint8_t>(col.at(1)),
               static_cast<uint8_t>(col.at(2))};
    c.weight = jc.at("weight").get<double>();
    ds.classes.push_back(c);
  }

  std::vector<fs::path> ann_files;
  fs::path ann_dir = fs::path(root) / "annotations";
  if (!fs::exists(ann_dir)) throw IoError("load_dataset: missing " + ann_dir.string());
  for (const auto& e : fs::directory_iterator(ann_dir)) {
    if (e.path().extension() == ".json") ann_files.push_back(e.path());
  }
  std::sort(ann_files.begin(), ann_files.end());

  for (const fs::path& ap : ann_files) {
    json ann;
    {
      std::ifstream af(ap);
      if (!af) throw IoError("load_dataset: cannot open " + ap.string());
      af >> ann;
    }
    VideoClip clip;
    clip.clip_id = ann.at("clip_id").get<std::string>();
    clip.height = ann.at("height").get<int>();
    clip.width = ann.at("width").get<int>();
    int T = ann.at("num_frames").get<int>();
    fs::path cdir = fs::path(root) / "clips" / clip.clip_id;
    for (int t = 0; t < T; ++t) {
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%04d.png", t);
      fs::path fp = cdir / name;
      if (!fs::exists(fp)) throw IoError("load_dataset: missing frame " + fp.string());
      clip.frames.push_back(read_png(fp.string()));
    }
    for (const json& jt : ann.at("instances")) {
      InstanceTrack tr = track_from_json(jt, clip.clip_id, T);
      for (int t = 0; t < T; ++t) {
        if (tr.visible[static_cast<size_t>(t)]) {
          Box expect = box_from_mask(tr.masks[static_cast<size_t>(t)]);
          const Box& got = tr.boxes[static_cast<size_t>(t)];
          double dx = std::max({std::fabs(expect[0] - got[0]) * clip.width,
                                std::fabs(expect[2] - got[2]) * clip.width,
                                std::fabs(expect[1] - got[1]) * clip.height,
                                std::fabs(expect[3] - got[3]) * clip.height});
          if (dx > 1.0 && warnings) {
            warnings->push_back("clip " + clip.clip_id + " instance " +
                                std::to_string(tr.instance_id) + " frame " +
                                std::to_string(t) + ": stored box deviates from mask by " +
                                std::to_string(dx) + " px");
          }
        }
      }
      clip.instances.push_back(std::move(tr));
    }
    ds.clips.push_back(std::move(clip));
  }
  return ds;
}

}  // namespace ookd::data
