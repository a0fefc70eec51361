#include "ookd/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>
#include <unordered_map>

#include "ookd/checkpoint.hpp"
#include "ookd/evalkit.hpp"
#include "ookd/qfa.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ookd::pipeline {

// ---------------------------------------------------------------- configs

json DataGenConfig::to_json() const {
  json palette = json::array();
  for (const data::ShapeClass& c : spec.palette) {
    palette.push_back({{"name", c.name},
                       {"kind", c.kind},
                       {"color", {c.color[0], c.color[1], c.color[2]}},
                       {"weight", c.weight}});
  }
  return {{"train_clips", train_clips},
          {"val_clips", val_clips},
          {"seed", seed},
          {"long_stride", long_stride},
          {"spec",
           {{"num_frames", spec.num_frames},
            {"height", spec.height},
            {"width", spec.width},
            {"min_instances", spec.min_instances},
            {"max_instances", spec.max_instances},
            {"allow_entry_exit", spec.allow_entry_exit},
            {"palette", palette},
            {"motion",
             {{"max_translation", spec.motion.max_translation},
              {"scale_jitter", spec.motion.scale_jitter},
              {"max_rotation", spec.motion.max_rotation},
              {"color_drift", spec.motion.color_drift},
              {"allow_occlusion", spec.motion.allow_occlusion}}}}}};
}

DataGenConfig DataGenConfig::from_json(const json& j) {
  DataGenConfig g;
  g.train_clips = j.value("train_clips", g.train_clips);
  g.val_clips = j.value("val_clips", g.val_clips);
  g.seed = j.value("seed", g.seed);
  g.long_stride = j.value("long_stride", g.long_stride);
  if (j.contains("spec")) {
    const json& s = j.at("spec");
    g.spec.num_frames = s.value("num_frames", g.spec.num_frames);
    g.spec.height = s.value("height", g.spec.height);
    g.spec.width = s.value("width", g.spec.width);
    g.spec.min_instances = s.value("min_instances", g.spec.min_instances);
    g.spec.max_instances = s.value("max_instances", g.spec.max_instances);
    g.spec.allow_entry_exit = s.value("allow_entry_exit", g.spec.allow_entry_exit);
    if (s.contains("palette")) {
      g.spec.palette.clear();
      for (const json& jc : s.at("palette")) {
        data::ShapeClass c;
        c.name = jc.at("name").get<std::string>();
        c.kind = jc.at("kind").get<std::string>();
        auto col = jc.at("color").get<std::vector<int>>();
        c.color = {static_cast<uint8_t>(col[0]), static_cast<uint8_t>(col[1]),
                   static_cast<uint8_t>(col[2])};
        c.weight = jc.at("weight").get<double>();
        g.spec.palette.push_back(c);
      }
    } else {
      g.spec.palette = data::default_palette();
    }
    if (s.contains("motion")) {
      const json& m = s.at("motion");
      g.spec.motion.max_translation = m.value("max_translation", g.spec.motion.max_translation);
      g.spec.motion.scale_jitter = m.value("scale_jitter", g.spec.motion.scale_jitter);
      g.spec.motion.max_rotation = m.value("max_rotation", g.spec.motion.max_rotation);
      g.spec.motion.color_drift = m.value("color_drift", g.spec.motion.color_drift);
      g.spec.motion.allow_occlusion = m.value("allow_occlusion", g.spec.motion.allow_occlusion);
    }
  } else {
    g.spec.palette = data::default_palette();
  }
  return g;
}

json OptimizerConfig::to_json() const {
  return {{"lr", lr},
          {"steps", steps},
          {"frames_per_clip", frames_per_clip},
          {"clips_per_batch", clips_per_batch},
          {"pair_window", pair_window}};
}

OptimizerConfig OptimizerConfig::from_json(const json& j) {
  OptimizerConfig c;
  c.lr = j.value("lr", c.lr);
  c.steps = j.value("steps", c.steps);
  c.frames_per_clip = j.value("frames_per_clip", c.frames_per_clip);
  c.clips_per_batch = j.value("clips_per_batch", c.clips_per_batch);
  c.pair_window = j.value("pair_window", c.pair_window);
  return c;
}

json AugmentSettings::to_json() const {
  return {{"enabled", enabled},
          {"k", k},
          {"minor_threshold", minor_threshold},
          {"mode", mode},
          {"max_pastes", max_pastes}};
}

AugmentSettings AugmentSettings::from_json(const json& j) {
  AugmentSettings c;
  c.enabled = j.value("enabled", c.enabled);
  c.k = j.value("k", c.k);
  c.minor_threshold = j.value("minor_threshold", c.minor_threshold);
  c.mode = j.value("mode", c.mode);
  c.max_pastes = j.value("max_pastes", c.max_pastes);
  return c;
}

json QfaSettings::to_json() const {
  return {{"lambda_b", lambda_b}, {"mode", mode}};
}

QfaSettings QfaSettings::from_json(const json& j) {
  QfaSettings c;
  c.lambda_b = j.value("lambda_b", c.lambda_b);
  c.mode = j.value("mode", c.mode);
  return c;
}

json DistillSettings::to_json() const {
  return {{"pairing", pairing}, {"cache_dir", cache_dir}};
}

DistillSettings DistillSettings::from_json(const json& j) {
  DistillSettings c;
  c.pairing = j.value("pairing", c.pairing);
  c.cache_dir = j.value("cache_dir", c.cache_dir);
  return c;
}

json TeacherSettings::to_json() const {
  return {{"steps", steps},
          {"lr", lr},
          {"frames_per_sample", frames_per_sample},
          {"aggregator", aggregator.to_json()}};
}

TeacherSettings TeacherSettings::from_json(const json& j) {
  TeacherSettings c;
  c.steps = j.value("steps", c.steps);
  c.lr = j.value("lr", c.lr);
  c.frames_per_sample = j.value("frames_per_sample", c.frames_per_sample);
  if (j.contains("aggregator")) c.aggregator = teacher::AggregatorConfig::from_json(j.at("aggregator"));
  return c;
}

json AblationSettings::to_json() const {
  return {{"variants", variants},
          {"seeds", seeds},
          {"stage2_steps", stage2_steps},
          {"parallel", parallel}};
}

AblationSettings AblationSettings::from_json(const json& j) {
  AblationSettings c;
  c.variants = j.value("variants", c.variants);
  c.seeds = j.value("seeds", c.seeds);
  c.stage2_steps = j.value("stage2_steps", c.stage2_steps);
  c.parallel = j.value("parallel", c.parallel);
  return c;
}

json RunConfig::to_json() const {
  return {{"dataset", dataset},
          {"val_short", val_short},
          {"val_long", val_long},
          {"model", model.to_json()},
          {"weights",
           {{"lambda1", weights.lambda1},
            {"lambda2", weights.lambda2},
            {"lambda3", weights.lambda3},
            {"lambda4", weights.lambda4},
            {"no_object_weight", weights.no_object_weight},
            {"embed_temperature", weights.embed_temperature}}},
          {"qfa", qfa.to_json()},
          {"augment", augment.to_json()},
          {"tracker", tracker.to_json()},
          {"optimizer", optimizer.to_json()},
          {"teacher", teacher.to_json()},
          {"distill", distill.to_json()},
          {"data_gen", data_gen.to_json()},
          {"ablation", ablation.to_json()},
          {"seed", seed},
          {"stage", stage}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  c.dataset = j.value("dataset", c.dataset);
  c.val_short = j.value("val_short", c.val_short);
  c.val_long = j.value("val_long", c.val_long);
  if (j.contains("model")) c.model = model::ModelConfig::from_json(j.at("model"));
  if (j.contains("weights")) {
    const json& w = j.at("weights");
    c.weights.lambda1 = w.value("lambda1", c.weights.lambda1);
    c.weights.lambda2 = w.value("lambda2", c.weights.lambda2);
    c.weights.lambda3 = w.value("lambda3", c.weights.lambda3);
    c.weights.lambda4 = w.value("lambda4", c.weights.lambda4);
    c.weights.no_object_weight = w.value("no_object_weight", c.weights.no_object_weight);
    c.weights.embed_temperature = w.value("embed_temperature", c.weights.embed_temperature);
  }
  if (j.contains("qfa")) c.qfa = QfaSettings::from_json(j.at("qfa"));
  if (j.contains("augment")) c.augment = AugmentSettings::from_json(j.at("augment"));
  if (j.contains("tracker")) c.tracker = track::TrackerConfig::from_json(j.at("tracker"));
  if (j.contains("optimizer")) c.optimizer = OptimizerConfig::from_json(j.at("optimizer"));
  if (j.contains("teacher")) c.teacher = TeacherSettings::from_json(j.at("teacher"));
  if (j.contains("distill")) c.distill = DistillSettings::from_json(j.at("distill"));
  if (j.contains("data_gen")) c.data_gen = DataGenConfig::from_json(j.at("data_gen"));
  if (j.contains("ablation")) c.ablation = AblationSettings::from_json(j.at("ablation"));
  c.seed = j.value("seed", c.seed);
  c.stage = j.value("stage", c.stage);
  return c;
}

void RunConfig::validate() const {
  model.validate();
  weights.validate();
  qfa::parse_match_mode(qfa.mode);
  if (augment.mode != "minor" && augment.mode != "uniform") {
    throw ValidationError("augment.mode: expected 'minor' or 'uniform'");
  }
  if (distill.pairing != "qfa" && distill.pairing != "index") {
    throw ValidationError("distill.pairing: expected 'qfa' or 'index'");
  }
  if (optimizer.steps < 1) throw ValidationError("optimizer.steps: must be >= 1");
  if (augment.k < 0.0 || augment.k > 1.0) {
    throw ValidationError("augment.k: must be in [0, 1]");
  }
}

void apply_override(json& j, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ValidationError("--set expects key.path=value, got '" + assignment + "'");
  }
  std::string path = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);
  json* node = &j;
  size_t start = 0;
  while (true) {
    size_t dot = path.find('.', start);
    std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ValidationError("--set: empty key segment in '" + path + "'");
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (const json::exception&) {
        parsed = value;  // plain string
      }
      (*node)[key] = parsed;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open " + path);
    try {
      f >> j;
    } catch (const json::exception& e) {
      throw ValidationError("config: parse error in " + path + ": " + e.what());
    }
  } else {
    j = json::object();
  }
  for (const std::string& ov : overrides) apply_override(j, ov);
  RunConfig cfg = RunConfig::from_json(j);
  cfg.validate();
  return cfg;
}

std::string runs_dir() {
  const char* env = std::getenv("OOKD_RUNS_DIR");
  return env && *env ? std::string(env) : std::string("runs");
}

// ---------------------------------------------------------------- data gen

namespace {

data::VideoClip subsample_clip(const data::VideoClip& clip, int stride) {
  data::VideoClip out;
  out.clip_id = clip.clip_id;
  out.height = clip.height;
  out.width = clip.width;
  std::vector<int> keep;
  for (int t = 0; t < clip.num_frames(); t += stride) keep.push_back(t);
  for (int t : keep) out.frames.push_back(clip.frames[static_cast<size_t>(t)]);
  for (const data::InstanceTrack& tr : clip.instances) {
    data::InstanceTrack o;
    o.instance_id = tr.instance_id;
    o.class_id = tr.class_id;
    for (int t : keep) {
      o.masks.push_back(tr.masks[static_cast<size_t>(t)]);
      o.boxes.push_back(tr.boxes[static_cast<size_t>(t)]);
      o.visible.push_back(tr.visible[static_cast<size_t>(t)]);
    }
    out.instances.push_back(std::move(o));
  }
  return out;
}

std::string clip_name(const char* prefix, int i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%05d", prefix, i);
  return buf;
}

}  // namespace

void generate_datasets(const DataGenConfig& gc, const std::string& out_root) {
  gc.spec.validate();
  auto make_split = [&](const char* name, int count, uint64_t seed_base, bool long_split) {
    data::Dataset ds;
    ds.classes = gc.spec.palette;
    for (int i = 0; i < count; ++i) {
      uint64_t seed = splitmix64(gc.seed ^ seed_base) + static_cast<uint64_t>(i);
      if (long_split) {
        // Same generative process run for stride times as many frames, then
        // subsampled: per-frame appearance change grows with the stride.
        data::ClipSpec longer = gc.spec;
        int stride = static_cast<int>(gc.long_stride);
        longer.num_frames = gc.spec.num_frames * stride;
        data::VideoClip raw = data::generate_clip(longer, seed, clip_name(name, i));
        ds.clips.push_back(subsample_clip(raw, stride));
      } else {
        ds.clips.push_back(data::generate_clip(gc.spec, seed, clip_name(name, i)));
      }
    }
    data::save_dataset(ds, (fs::path(out_root) / name).string());
  };
  make_split("train", gc.train_clips, 0x11AA, false);
  make_split("val_short", gc.val_clips, 0x22BB, false);
  make_split("val_long", gc.val_clips, 0x33CC, true);
}

// ---------------------------------------------------------------- training

namespace {

struct TeacherContext {
  model::VisModel frame_model;
  teacher::Aggregator aggregator;
  std::string pairing;  // qfa | index
  double lambda_b = 2.0;
  std::string cache_dir;
  uint64_t teacher_hash = 0;
  std::unordered_map<std::string, std::pair<teacher::OfflineKnowledge, teacher::VideoAssignment>>
      cache;

  TeacherContext(const model::ModelConfig& mc, const teacher::AggregatorConfig& ac)
      : frame_model(mc, 0), aggregator(mc, ac, 0) {}
};

void write_knowledge_cache(const std::string& path, const teacher::OfflineKnowledge& k,
                           const teacher::VideoAssignment& va) {
  std::ofstream f(path, std::ios::binary);
  auto put_tensor = [&](const nn::Tensor& t) {
    int nd = t.ndim();
    f.write(reinterpret_cast<const char*>(&nd), sizeof(nd));
    for (int i = 0; i < nd; ++i) {
      int d = t.dim(i);
      f.write(reinterpret_cast<const char*>(&d), sizeof(d));
    }
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
  };
  put_tensor(k.queries);
  put_tensor(k.embeddings);
  put_tensor(k.video_class_logits);
  put_tensor(k.per_frame_boxes);
  auto put_ints = [&](const std::vector<int>& v) {
    int n = static_cast<int>(v.size());
    f.write(reinterpret_cast<const char*>(&n), sizeof(n));
    f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(int)));
  };
  put_ints(va.sigma);
  put_ints(va.track_ids);
}

bool read_knowledge_cache(const std::string& path, teacher::OfflineKnowledge* k,
                          teacher::VideoAssignment* va) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return false;
  auto get_tensor = [&](nn::Tensor* t) {
    int nd = 0;
    f.read(reinterpret_cast<char*>(&nd), sizeof(nd));
    std::vector<int> shape(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) f.read(reinterpret_cast<char*>(&shape[static_cast<size_t>(i)]), sizeof(int));
    *t = nn::Tensor(shape);
    f.read(reinterpret_cast<char*>(t->data()),
           static_cast<std::streamsize>(t->numel() * sizeof(double)));
  };
  get_tensor(&k->queries);
  get_tensor(&k->embeddings);
  get_tensor(&k->video_class_logits);
  get_tensor(&k->per_frame_boxes);
  auto get_ints = [&](std::vector<int>* v) {
    int n = 0;
    f.read(reinterpret_cast<char*>(&n), sizeof(n));
    v->resize(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(v->data()), static_cast<std::streamsize>(v->size() * sizeof(int)));
  };
  get_ints(&va->sigma);
  get_ints(&va->track_ids);
  return static_cast<bool>(f);
}

const std::pair<teacher::OfflineKnowledge, teacher::VideoAssignment>& teacher_knowledge(
    TeacherContext& tc, const data::VideoClip& clip, bool cacheable) {
  static thread_local std::pair<teacher::OfflineKnowledge, teacher::VideoAssignment> scratch;
  if (cacheable) {
    auto it = tc.cache.find(clip.clip_id);
    if (it != tc.cache.end()) return it->second;
    if (!tc.cache_dir.empty()) {
      char hex[32];
      std::snprintf(hex, sizeof(hex), "%016llx",
                    static_cast<unsigned long long>(tc.teacher_hash));
      fs::path dir = fs::path(tc.cache_dir) / hex;
      fs::create_directories(dir);
      fs::path file = dir / (clip.clip_id + ".bin");
      teacher::OfflineKnowledge k;
      teacher::VideoAssignment va;
      if (read_knowledge_cache(file.string(), &k, &va)) {
        return tc.cache.emplace(clip.clip_id, std::make_pair(std::move(k), std::move(va)))
            .first->second;
      }
      k = teacher::build_offline_knowledge(clip, tc.frame_model, tc.aggregator);
      va = teacher::match_video(k, clip, tc.lambda_b, qfa::MatchMode::Hungarian);
      write_knowledge_cache(file.string(), k, va);
      return tc.cache.emplace(clip.clip_id, std::make_pair(std::move(k), std::move(va)))
          .first->second;
    }
    teacher::OfflineKnowledge k = teacher::build_offline_knowledge(clip, tc.frame_model, tc.aggregator);
    teacher::VideoAssignment va =
        teacher::match_video(k, clip, tc.lambda_b, qfa::MatchMode::Hungarian);
    return tc.cache.emplace(clip.clip_id, std::make_pair(std::move(k), std::move(va)))
        .first->second;
  }
  scratch.first = teacher::build_offline_knowledge(clip, tc.frame_model, tc.aggregator);
  scratch.second = teacher::match_video(scratch.first, clip, tc.lambda_b,
                                        qfa::MatchMode::Hungarian);
  return scratch;
}

std::vector<int> frame_assignment(const model::FrameQuerySet& fqs,
                                  const losses::FrameGroundTruth& gt, double lambda_b,
                                  qfa::MatchMode mode) {
  if (gt.classes.empty()) return {};
  qfa::CostMatrix cm = qfa::cost_matrix(fqs.class_logits.val(), fqs.boxes.val(), gt.classes,
                                        gt.boxes, lambda_b);
  return qfa::match(cm.S, mode).sigma;
}

struct StudentLoopResult {
  StageOutcome outcome;
};

// Common training loop for the baseline and distillation stages; the
// distillation path adds the teacher knowledge lookup and the kd term.
StageOutcome student_loop(const RunConfig& cfg, const data::Dataset& dataset,
                          const std::string& run_dir, const std::string& init_checkpoint,
                          TeacherContext* teacher) {
  cfg.validate();
  if (dataset.clips.empty()) throw ValidationError("training: dataset has no clips");
  fs::create_directories(run_dir);
  {
    std::ofstream cf(fs::path(run_dir) / "config.json");
    cf << cfg.to_json().dump(2) << "\n";
  }

  model::VisModel student(cfg.model, splitmix64(cfg.seed ^ 0xBA5E));
  if (!init_checkpoint.empty()) {
    json meta = ckpt::load_checkpoint(init_checkpoint, student.parameters());
    model::ModelConfig stored = model::ModelConfig::from_json(meta.at("model_config"));
    if (!(stored == cfg.model)) {
      throw ValidationError("init checkpoint model config does not match run config");
    }
  }

  // Class statistics and paste sources for Minor-Paste.
  augment::ClassStats stats;
  std::vector<augment::SourceRef> sources;
  if (cfg.augment.enabled) {
    data::DatasetStats ds = data::compute_class_stats(dataset.clips, dataset.num_classes());
    stats = augment::make_class_stats(ds.p, cfg.augment.k, cfg.augment.minor_threshold);
    if (cfg.augment.mode == "minor") {
      sources = augment::select_minor_sources(dataset.clips, stats);
    } else {
      for (size_t ci = 0; ci < dataset.clips.size(); ++ci) {
        for (size_t ti = 0; ti < dataset.clips[ci].instances.size(); ++ti) {
          sources.push_back({static_cast<int>(ci), static_cast<int>(ti)});
        }
      }
    }
  }

  nn::Adam adam(student.parameters(), cfg.optimizer.lr);
  RngStream rng = RngStream(cfg.seed).fork(0x57EB);
  qfa::MatchMode match_mode = qfa::parse_match_mode(cfg.qfa.mode);

  std::ofstream log(fs::path(run_dir) / "log.jsonl");
  StageOutcome out;
  double first_acc = 0.0, last_acc = 0.0, kd_last_acc = 0.0;
  int window = std::max(1, std::min(20, cfg.optimizer.steps / 5));

  std::vector<size_t> order(dataset.clips.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();
  int64_t epoch = -1;

  auto next_clip = [&]() {
    if (cursor >= order.size()) {
      rng.shuffle(order);
      cursor = 0;
      ++epoch;
    }
    return order[cursor++];
  };

  // One clip's contribution to the batch loss. Returns the total-loss var
  // and fills the logging fields.
  auto clip_loss = [&](nn::Tape& tape, size_t clip_idx, losses::IdolBreakdown* breakdown,
                       double* kd_value, bool* augmented_flag) {
    const data::VideoClip* clip = &dataset.clips[clip_idx];

    // Minor-Paste, identically seeded per (epoch, clip).
    data::VideoClip augmented;
    bool was_augmented = false;
    if (cfg.augment.enabled && !sources.empty()) {
      RngStream aug_rng =
          RngStream(cfg.seed).fork(0xA06).fork(static_cast<uint64_t>(epoch) * 1000003 + clip_idx);
      for (int p = 0; p < cfg.augment.max_pastes; ++p) {
        const augment::SourceRef& ref =
            sources[static_cast<size_t>(aug_rng.randint(static_cast<int64_t>(sources.size())))];
        const data::VideoClip& source = dataset.clips[static_cast<size_t>(ref.clip_index)];
        int cls = source.instances[static_cast<size_t>(ref.track_index)].class_id;
        double prob = cfg.augment.mode == "minor" ? stats.p_s[static_cast<size_t>(cls)]
                                                  : cfg.augment.k;
        augment::PasteOutcome po;
        data::VideoClip pasted = augment::minor_paste(was_augmented ? augmented : *clip, source,
                                                      ref.track_index, prob, aug_rng, &po);
        if (po.pasted) {
          augmented = std::move(pasted);
          was_augmented = true;
        }
      }
      if (was_augmented) clip = &augmented;
    }
    *augmented_flag = was_augmented;

    int T = clip->num_frames();
    int key = static_cast<int>(rng.randint(T));
    int ref_frame = key;
    if (T > 1) {
      std::vector<int> offsets;
      for (int d = -cfg.optimizer.pair_window; d <= cfg.optimizer.pair_window; ++d) {
        if (d != 0 && key + d >= 0 && key + d < T) offsets.push_back(d);
      }
      ref_frame = key + offsets[static_cast<size_t>(
                            rng.randint(static_cast<int64_t>(offsets.size())))];
    }

    model::FrameQuerySet fq_a =
        student.forward(tape, model::frame_to_tensor(clip->frames[static_cast<size_t>(key)]));
    model::FrameQuerySet fq_b = student.forward(
        tape, model::frame_to_tensor(clip->frames[static_cast<size_t>(ref_frame)]));
    losses::FrameGroundTruth gt_a = losses::frame_ground_truth(*clip, key);
    losses::FrameGroundTruth gt_b = losses::frame_ground_truth(*clip, ref_frame);

    losses::FramePredictions pa{fq_a.class_logits, fq_a.boxes, fq_a.mask_logits, fq_a.embeddings};
    losses::FramePredictions pb{fq_b.class_logits, fq_b.boxes, fq_b.mask_logits, fq_b.embeddings};
    std::vector<int> sigma_a = frame_assignment(fq_a, gt_a, cfg.qfa.lambda_b, match_mode);
    std::vector<int> sigma_b = frame_assignment(fq_b, gt_b, cfg.qfa.lambda_b, match_mode);

    nn::Var idol = losses::idol_loss(tape, pa, gt_a, sigma_a, pb, gt_b, sigma_b, cfg.weights,
                                     breakdown);

    if (!teacher) return idol;

    const auto& [knowledge, assignment] = teacher_knowledge(*teacher, *clip, !was_augmented);
    nn::Var student_rows;
    nn::Tensor teacher_rows;
    if (teacher->pairing == "index") {
      // KD without QFA: query n is paired with teacher query n directly.
      student_rows = nn::concat_rows({fq_a.embeddings, fq_b.embeddings});
      teacher_rows = nn::Tensor({2 * cfg.model.num_queries, cfg.model.hidden_dim});
      teacher_rows.mat().topRows(cfg.model.num_queries) = knowledge.embeddings.mat();
      teacher_rows.mat().bottomRows(cfg.model.num_queries) = knowledge.embeddings.mat();
    } else {
      // QFA pairing through shared ground-truth instances.
      std::vector<int> srow;
      std::vector<int> trow;
      auto add_pairs = [&](const losses::FrameGroundTruth& gt, const std::vector<int>& sigma,
                           int frame_offset) {
        for (size_t m = 0; m < gt.track_ids.size(); ++m) {
          for (size_t v = 0; v < assignment.track_ids.size(); ++v) {
            if (assignment.track_ids[v] == gt.track_ids[m]) {
              srow.push_back(frame_offset + sigma[m]);
              trow.push_back(assignment.sigma[v]);
            }
          }
        }
      };
      add_pairs(gt_a, sigma_a, 0);
      add_pairs(gt_b, sigma_b, cfg.model.num_queries);
      nn::Var both = nn::concat_rows({fq_a.embeddings, fq_b.embeddings});
      if (!srow.empty()) {
        student_rows = nn::gather_rows(both, srow);
        teacher_rows = nn::Tensor({static_cast<int>(trow.size()), cfg.model.hidden_dim});
        for (size_t i = 0; i < trow.size(); ++i) {
          teacher_rows.mat().row(static_cast<int>(i)) =
              knowledge.embeddings.mat().row(trow[i]);
        }
      } else {
        teacher_rows = nn::Tensor({0, cfg.model.hidden_dim});
        student_rows = tape.leaf(nn::Tensor({0, cfg.model.hidden_dim}));
      }
    }
    losses::ScalarFlag kd = losses::kd_loss(tape, student_rows, teacher_rows);
    *kd_value += kd.value.val().item();
    return losses::total_loss(tape, idol, kd.value, cfg.weights.lambda4);
  };

  int batch = std::max(1, cfg.optimizer.clips_per_batch);
  for (int step = 0; step < cfg.optimizer.steps; ++step) {
    nn::Tape tape;
    losses::IdolBreakdown breakdown;
    double kd_value = 0.0;
    bool was_augmented = false;
    std::vector<nn::Var> per_clip;
    for (int b = 0; b < batch; ++b) {
      losses::IdolBreakdown bd;
      bool aug = false;
      per_clip.push_back(clip_loss(tape, next_clip(), &bd, &kd_value, &aug));
      breakdown.cls += bd.cls / batch;
      breakdown.box += bd.box / batch;
      breakdown.mask += bd.mask / batch;
      breakdown.embed += bd.embed / batch;
      was_augmented = was_augmented || aug;
    }
    kd_value /= batch;
    nn::Var total = per_clip[0];
    for (size_t i = 1; i < per_clip.size(); ++i) total = nn::add(total, per_clip[i]);
    if (batch > 1) total = nn::scale(total, 1.0 / batch);

    double loss_value = total.val().item();
    if (!std::isfinite(loss_value)) {
      log << json{{"step", step}, {"event", "divergence"}}.dump() << "\n";
      throw DivergenceError("training diverged at step " + std::to_string(step) +
                            " (non-finite loss)");
    }
    if (step == 0) out.initial_loss = loss_value;
    out.final_loss = loss_value;
    if (step < window) first_acc += loss_value;
    if (step >= cfg.optimizer.steps - window) {
      last_acc += loss_value;
      kd_last_acc += kd_value;
    }

    adam.zero_grad();
    tape.backward(total);
    adam.set_lr(nn::cosine_lr(cfg.optimizer.lr, step, cfg.optimizer.steps));
    adam.step();

    log << json{{"step", step},
                {"total", loss_value},
                {"cls", breakdown.cls},
                {"box", breakdown.box},
                {"mask", breakdown.mask},
                {"embed", breakdown.embed},
                {"kd", kd_value},
                {"lr", adam.lr()},
                {"augmented", was_augmented}}
               .dump()
        << "\n";
  }

  out.initial_loss = first_acc / window;
  out.final_loss = last_acc / window;
  out.final_kd = kd_last_acc / window;

  fs::path ckpt_path = fs::path(run_dir) / "checkpoint.ckpt";
  json meta = {{"kind", "vis_model"},
               {"model_config", cfg.model.to_json()},
               {"stage", cfg.stage},
               {"seed", cfg.seed}};
  ckpt::save_checkpoint(ckpt_path.string(), student.parameters(), meta);
  out.checkpoint = ckpt_path.string();
  out.weights_hash = student.weights_hash();
  return out;
}

data::Dataset load_dataset_checked(const std::string& root) {
  std::vector<std::string> warnings;
  data::Dataset ds = data::load_dataset(root, &warnings);
  for (const std::string& w : warnings) {
    std::fprintf(stderr, "[ookd] dataset warning: %s\n", w.c_str());
  }
  return ds;
}

}  // namespace

StageOutcome train_baseline(const RunConfig& cfg, const std::string& run_dir,
                            const std::string& init_checkpoint) {
  RunConfig c = cfg;
  if (c.stage.empty()) c.stage = "baseline";
  data::Dataset ds = load_dataset_checked(c.dataset);
  return student_loop(c, ds, run_dir, init_checkpoint, nullptr);
}

StageOutcome train_teacher(const RunConfig& cfg, const std::string& run_dir,
                           const std::string& baseline_checkpoint) {
  cfg.validate();
  fs::create_directories(run_dir);
  data::Dataset ds = load_dataset_checked(cfg.dataset);

  model::VisModel frame_model(cfg.model, 0);
  json base_meta = ckpt::load_checkpoint(baseline_checkpoint, frame_model.parameters());
  if (!(model::ModelConfig::from_json(base_meta.at("model_config")) == cfg.model)) {
    throw ValidationError("train_teacher: baseline checkpoint config mismatch");
  }

  teacher::Aggregator agg(cfg.model, cfg.teacher.aggregator, splitmix64(cfg.seed ^ 0xA99));
  teacher::AggregatorTrainOptions opts;
  opts.steps = cfg.teacher.steps;
  opts.lr = cfg.teacher.lr;
  opts.frames_per_sample = cfg.teacher.frames_per_sample;
  opts.lambda_b = cfg.qfa.lambda_b;
  opts.weights = cfg.weights;
  opts.seed = cfg.seed;
  std::ofstream log(fs::path(run_dir) / "log.jsonl");
  opts.on_step = [&](int step, double loss) {
    log << json{{"step", step}, {"loss", loss}}.dump() << "\n";
  };
  teacher::TrainStats st = teacher::train_aggregator(ds.clips, frame_model, agg, opts);

  {
    std::ofstream cf(fs::path(run_dir) / "config.json");
    cf << cfg.to_json().dump(2) << "\n";
  }
  fs::path out = fs::path(run_dir) / "aggregator.ckpt";
  json meta = {{"kind", "aggregator"},
               {"model_config", cfg.model.to_json()},
               {"aggregator_config", cfg.teacher.aggregator.to_json()},
               {"baseline_checkpoint_hash",
                static_cast<uint64_t>(ckpt::checkpoint_hash(baseline_checkpoint))},
               {"seed", cfg.seed}};
  ckpt::save_checkpoint(out.string(), agg.parameters(), meta);
  StageOutcome o;
  o.checkpoint = out.string();
  o.initial_loss = st.initial_loss;
  o.final_loss = st.final_loss;
  o.weights_hash = agg.weights_hash();
  return o;
}

StageOutcome distill(const RunConfig& cfg, const std::string& run_dir,
                     const std::string& student_init, const std::string& teacher_checkpoint,
                     const std::string& aggregator_checkpoint) {
  RunConfig c = cfg;
  if (c.stage.empty()) c.stage = "distill";
  data::Dataset ds = load_dataset_checked(c.dataset);

  TeacherContext tc(c.model, c.teacher.aggregator);
  json fmeta = ckpt::load_checkpoint(teacher_checkpoint, tc.frame_model.parameters());
  if (!(model::ModelConfig::from_json(fmeta.at("model_config")) == c.model)) {
    throw ValidationError("distill: teacher frame checkpoint config mismatch");
  }
  json ameta = ckpt::load_checkpoint(aggregator_checkpoint, tc.aggregator.parameters());
  if (!(teacher::AggregatorConfig::from_json(ameta.at("aggregator_config")) ==
        c.teacher.aggregator)) {
    throw ValidationError("distill: aggregator checkpoint config mismatch");
  }
  tc.pairing = c.distill.pairing;
  tc.lambda_b = c.qfa.lambda_b;
  tc.cache_dir = c.distill.cache_dir;
  tc.teacher_hash =
      ckpt::checkpoint_hash(teacher_checkpoint) ^ ckpt::checkpoint_hash(aggregator_checkpoint);

  uint64_t frame_hash = tc.frame_model.weights_hash();
  uint64_t agg_hash = tc.aggregator.weights_hash();
  StageOutcome out = student_loop(c, ds, run_dir, student_init, &tc);
  if (tc.frame_model.weights_hash() != frame_hash ||
      tc.aggregator.weights_hash() != agg_hash) {
    throw std::runtime_error("distill: teacher weights changed during distillation");
  }
  return out;
}

// ------------------------------------------------------------- evaluation

void track_dataset(const RunConfig& cfg, const std::string& checkpoint,
                   const std::string& dataset_root, const std::string& out_dir) {
  data::Dataset ds = load_dataset_checked(dataset_root);
  model::VisModel m(cfg.model, 0);
  json meta = ckpt::load_checkpoint(checkpoint, m.parameters());
  if (!(model::ModelConfig::from_json(meta.at("model_config")) == cfg.model)) {
    throw ValidationError("track: checkpoint model config mismatch");
  }
  fs::create_directories(out_dir);
  for (const data::VideoClip& clip : ds.clips) {
    std::vector<track::TrackResult> tracks = track_video(clip, m, cfg.tracker);
    track::save_results(out_dir, clip, tracks);
  }
}

json evaluate_predictions(const std::string& pred_dir, const std::string& gt_root) {
  data::Dataset ds = load_dataset_checked(gt_root);
  std::vector<evalkit::GtTrack> gts;
  for (const data::VideoClip& clip : ds.clips) {
    for (const data::InstanceTrack& tr : clip.instances) {
      bool any = false;
      for (const data::Mask& m : tr.masks) any = any || !m.empty();
      if (!any) continue;
      gts.push_back({clip.clip_id, tr.class_id, tr.masks});
    }
  }
  std::vector<evalkit::PredTrack> preds;
  for (const data::VideoClip& clip : ds.clips) {
    fs::path file = fs::path(pred_dir) / (clip.clip_id + ".json");
    if (!fs::exists(file)) {
      throw IoError("evaluate: missing prediction file " + file.string());
    }
    auto tracks = track::load_results(file.string());
    for (const track::TrackResult& tr : tracks) {
      preds.push_back({clip.clip_id, tr.class_id, tr.score, tr.masks});
    }
  }
  evalkit::EvalResult res = evalkit::video_map(preds, gts, ds.num_classes());
  if (!res.ap_monotone_in_threshold()) {
    throw std::runtime_error("evaluate: AP is not monotone in the IoU threshold");
  }
  json out = res.to_json();
  out["num_videos"] = ds.clips.size();
  out["num_classes"] = ds.num_classes();
  return out;
}

json evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint,
                         const std::string& dataset_root, const std::string& out_dir) {
  track_dataset(cfg, checkpoint, dataset_root, out_dir);
  json metrics = evaluate_predictions(out_dir, dataset_root);
  std::ofstream f(fs::path(out_dir) / "metrics.json");
  f << metrics.dump(2) << "\n";
  return metrics;
}

evalkit::SimilarityHistogram checkpoint_similarity(const RunConfig& cfg,
                                                   const std::string& checkpoint,
                                                   const std::string& dataset_root,
                                                   uint64_t seed) {
  data::Dataset ds = load_dataset_checked(dataset_root);
  model::VisModel m(cfg.model, 0);
  ckpt::load_checkpoint(checkpoint, m.parameters());
  evalkit::SimilarityOptions opts;
  opts.num_videos = 100;
  opts.lambda_b = cfg.qfa.lambda_b;
  opts.seed = seed;
  return evalkit::similarity_histogram(m, ds.clips, opts);
}

// --------------------------------------------------------------- ablation

namespace {

struct VariantResult {
  std::string name;
  double map_short = 0.0, map_long = 0.0;
  double minor_ap_short = -1.0;
  double sim_mean = 0.0;
  json detail;
};

std::vector<int> minor_classes_from_stats(const std::vector<double>& p, double threshold) {
  std::vector<int> out;
  for (size_t c = 0; c < p.size(); ++c) {
    if (p[c] < threshold) out.push_back(static_cast<int>(c));
  }
  return out;
}

double mean_minor_ap(const json& metrics, const std::vector<int>& minors) {
  double acc = 0.0;
  int n = 0;
  for (int c : minors) {
    double ap = metrics.at("per_class_ap")[static_cast<size_t>(c)].get<double>();
    if (ap >= 0.0) {
      acc += ap;
      ++n;
    }
  }
  return n > 0 ? acc / n : -1.0;
}

}  // namespace

json run_ablation(const RunConfig& cfg, const std::string& run_dir) {
  cfg.validate();
  fs::create_directories(run_dir);
  const AblationSettings& ab = cfg.ablation;
  const std::vector<std::string> known{"baseline", "minor_paste", "kd_no_qfa", "kd_qfa", "both"};
  for (const std::string& v : ab.variants) {
    if (std::find(known.begin(), known.end(), v) == known.end()) {
      throw ValidationError("ablation: unknown variant '" + v + "'");
    }
  }
  bool needs_aug_base =
      std::find(ab.variants.begin(), ab.variants.end(), "minor_paste") != ab.variants.end() ||
      std::find(ab.variants.begin(), ab.variants.end(), "both") != ab.variants.end();
  bool needs_teacher =
      std::find_if(ab.variants.begin(), ab.variants.end(), [](const std::string& v) {
        return v == "kd_qfa" || v == "kd_no_qfa" || v == "both";
      }) != ab.variants.end();

  // Training-set statistics determine the minor classes.
  data::Dataset train_ds = load_dataset_checked(cfg.dataset);
  data::DatasetStats tstats = data::compute_class_stats(train_ds.clips, train_ds.num_classes());
  std::vector<int> minors = minor_classes_from_stats(tstats.p, cfg.augment.minor_threshold);

  json per_seed = json::array();
  std::vector<json> seed_results(ab.seeds.size());

  auto run_seed = [&](size_t seed_index) {
    uint64_t seed = ab.seeds[seed_index];
    RunConfig base = cfg;
    base.seed = seed;
    fs::path sdir = fs::path(run_dir) / ("seed" + std::to_string(seed));

    RunConfig cfg_a = base;
    cfg_a.augment.enabled = false;
    cfg_a.stage = "baselineA";
    StageOutcome a = train_baseline(cfg_a, (sdir / "stageA").string());

    StageOutcome a_aug;
    if (needs_aug_base) {
      RunConfig cfg_aa = base;
      cfg_aa.augment.enabled = true;
      cfg_aa.stage = "baselineA_aug";
      a_aug = train_baseline(cfg_aa, (sdir / "stageA_aug").string());
    }

    StageOutcome teacher_out;
    uint64_t teacher_file_hash = 0, agg_file_hash = 0;
    if (needs_teacher) {
      RunConfig cfg_t = base;
      cfg_t.stage = "teacher";
      teacher_out = train_teacher(cfg_t, (sdir / "teacher").string(), a.checkpoint);
      teacher_file_hash = ckpt::checkpoint_hash(a.checkpoint);
      agg_file_hash = ckpt::checkpoint_hash(teacher_out.checkpoint);
    }

    json variants = json::object();
    for (const std::string& name : ab.variants) {
      RunConfig vc = base;
      vc.optimizer.steps = ab.stage2_steps;
      vc.stage = name;
      StageOutcome stage_b;
      fs::path vdir = sdir / name;
      if (name == "baseline") {
        vc.augment.enabled = false;
        vc.weights.lambda4 = 0.0;
        stage_b = train_baseline(vc, vdir.string(), a.checkpoint);
      } else if (name == "minor_paste") {
        vc.augment.enabled = true;
        vc.weights.lambda4 = 0.0;
        stage_b = train_baseline(vc, vdir.string(), a_aug.checkpoint);
      } else if (name == "kd_no_qfa") {
        vc.augment.enabled = false;
        vc.distill.pairing = "index";
        stage_b = distill(vc, vdir.string(), a.checkpoint, a.checkpoint, teacher_out.checkpoint);
      } else if (name == "kd_qfa") {
        vc.augment.enabled = false;
        vc.distill.pairing = "qfa";
        stage_b = distill(vc, vdir.string(), a.checkpoint, a.checkpoint, teacher_out.checkpoint);
      } else {  // both
        vc.augment.enabled = true;
        vc.distill.pairing = "qfa";
        stage_b =
            distill(vc, vdir.string(), a_aug.checkpoint, a.checkpoint, teacher_out.checkpoint);
      }

      json m_short = evaluate_checkpoint(base, stage_b.checkpoint, cfg.val_short,
                                         (vdir / "eval_short").string());
      json m_long = evaluate_checkpoint(base, stage_b.checkpoint, cfg.val_long,
                                        (vdir / "eval_long").string());
      evalkit::SimilarityHistogram hist_s =
          checkpoint_similarity(base, stage_b.checkpoint, cfg.val_short, 1234);
      evalkit::SimilarityHistogram hist_l =
          checkpoint_similarity(base, stage_b.checkpoint, cfg.val_long, 1234);
      double sim_mean =
          (hist_s.mean * hist_s.count + hist_l.mean * hist_l.count) /
          std::max<int64_t>(1, hist_s.count + hist_l.count);

      variants[name] = {{"checkpoint", stage_b.checkpoint},
                        {"mAP_S", m_short.at("mAP").get<double>() * 100.0},
                        {"mAP_L", m_long.at("mAP").get<double>() * 100.0},
                        {"minor_ap_S", mean_minor_ap(m_short, minors) * 100.0},
                        {"minor_ap_L", mean_minor_ap(m_long, minors) * 100.0},
                        {"sim_mean", sim_mean},
                        {"final_loss", stage_b.final_loss},
                        {"final_kd", stage_b.final_kd},
                        {"metrics_short", m_short},
                        {"metrics_long", m_long}};
    }

    if (needs_teacher) {
      // Stage isolation: the teacher checkpoint files are untouched.
      if (ckpt::checkpoint_hash(a.checkpoint) != teacher_file_hash ||
          ckpt::checkpoint_hash(teacher_out.checkpoint) != agg_file_hash) {
        throw std::runtime_error("ablation: teacher files changed during distillation");
      }
    }
    seed_results[seed_index] = {{"seed", seed}, {"variants", variants}};
  };

  if (ab.parallel && ab.seeds.size() > 1) {
    unsigned workers = std::min<unsigned>(std::thread::hardware_concurrency(),
                                          static_cast<unsigned>(ab.seeds.size()));
    workers = std::max(1u, std::min(workers, 3u));
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&]() {
        while (true) {
          size_t i = next.fetch_add(1);
          if (i >= ab.seeds.size()) break;
          run_seed(i);
        }
      });
    }
    for (std::thread& th : pool) th.join();
  } else {
    for (size_t i = 0; i < ab.seeds.size(); ++i) run_seed(i);
  }
  for (json& sr : seed_results) per_seed.push_back(sr);

  // Seed-mean summary per variant.
  json mean = json::object();
  for (const std::string& name : ab.variants) {
    double ms = 0, ml = 0, sim = 0, minor_s = 0, minor_l = 0;
    for (const json& sr : per_seed) {
      const json& v = sr.at("variants").at(name);
      ms += v.at("mAP_S").get<double>();
      ml += v.at("mAP_L").get<double>();
      sim += v.at("sim_mean").get<double>();
      minor_s += v.at("minor_ap_S").get<double>();
      minor_l += v.at("minor_ap_L").get<double>();
    }
    double n = static_cast<double>(per_seed.size());
    mean[name] = {{"mAP_S", ms / n},
                  {"mAP_L", ml / n},
                  {"sim_mean", sim / n},
                  {"minor_ap_S", minor_s / n},
                  {"minor_ap_L", minor_l / n}};
  }

  json result = {{"seeds", ab.seeds},
                 {"variants", ab.variants},
                 {"per_seed", per_seed},
                 {"mean", mean},
                 {"train_class_frequencies", tstats.p},
                 {"minor_classes", minors}};

  {
    std::ofstream jf(fs::path(run_dir) / "ablation.json");
    jf << result.dump(2) << "\n";
  }
  {
    std::ofstream mf(fs::path(run_dir) / "ablation.md");
    mf << "| variant | mAP_S | mAP_L | minor AP_S | sim mean |\n";
    mf << "|---|---|---|---|---|\n";
    char row[256];
    for (const std::string& name : ab.variants) {
      const json& v = mean.at(name);
      std::snprintf(row, sizeof(row), "| %s | %.2f | %.2f | %.2f | %.4f |\n", name.c_str(),
                    v.at("mAP_S").get<double>(), v.at("mAP_L").get<double>(),
                    v.at("minor_ap_S").get<double>(), v.at("sim_mean").get<double>());
      mf << row;
    }
  }
  return result;
}

}  // namespace ookd::pipeline
