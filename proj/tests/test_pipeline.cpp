#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ookd/checkpoint.hpp"
#include "ookd/evalkit.hpp"
#include "ookd/pipeline.hpp"
#include "ookd/tracker.hpp"

using namespace ookd;
using namespace ookd::pipeline;
namespace fs = std::filesystem;
using nlohmann::json;

TEST_SUITE_BEGIN("pipeline");

namespace {

// Shared tiny dataset + config fixture, generated once.
struct Fixture {
  fs::path root;
  RunConfig cfg;

  Fixture() {
    root = fs::temp_directory_path() / "ookd_pipeline_fixture";
    cfg.model.num_queries = 6;
    cfg.model.hidden_dim = 32;
    cfg.model.num_classes = 7;
    cfg.model.decoder_layers = 1;
    cfg.model.attention_heads = 4;
    cfg.model.backbone_widths = {8, 12, 24};
    cfg.model.mask_dim = 6;
    cfg.model.mask_head_hidden = 6;
    cfg.model.input_height = 48;
    cfg.model.input_width = 48;
    cfg.data_gen.train_clips = 20;
    cfg.data_gen.val_clips = 4;
    cfg.data_gen.spec.num_frames = 6;
    cfg.data_gen.spec.height = 48;
    cfg.data_gen.spec.width = 48;
    cfg.data_gen.spec.palette = data::default_palette();
    cfg.data_gen.seed = 77;
    cfg.optimizer.steps = 200;
    cfg.optimizer.lr = 1e-3;
    cfg.optimizer.clips_per_batch = 2;
    cfg.teacher.steps = 120;
    cfg.tracker.conf_threshold = 0.3;
    cfg.tracker.retire_after = 100;
    cfg.seed = 1;
    if (!fs::exists(root / "train" / "meta.json")) {
      generate_datasets(cfg.data_gen, root.string());
    }
    cfg.dataset = (root / "train").string();
    cfg.val_short = (root / "val_short").string();
    cfg.val_long = (root / "val_long").string();
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("ookd_pl_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("config round-trips exactly and accepts dotted overrides") {
  RunConfig cfg = fixture().cfg;
  cfg.stage = "unit";
  json j = cfg.to_json();
  RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json() == j);

  json j2 = j;
  apply_override(j2, "weights.lambda4=0.25");
  apply_override(j2, "qfa.mode=argmin");
  apply_override(j2, "augment.enabled=true");
  apply_override(j2, "optimizer.steps=5");
  RunConfig c2 = RunConfig::from_json(j2);
  CHECK(c2.weights.lambda4 == 0.25);
  CHECK(c2.qfa.mode == "argmin");
  CHECK(c2.augment.enabled);
  CHECK(c2.optimizer.steps == 5);
  CHECK_THROWS_AS(apply_override(j2, "no_equals_sign"), ValidationError);

  json bad = j;
  apply_override(bad, "qfa.mode=bogus");
  CHECK_THROWS_AS(RunConfig::from_json(bad).validate(), ValidationError);
}

TEST_CASE("generated splits load and the long split subsamples a longer process") {
  Fixture& f = fixture();
  data::Dataset train = data::load_dataset(f.cfg.dataset);
  data::Dataset vs = data::load_dataset(f.cfg.val_short);
  data::Dataset vl = data::load_dataset(f.cfg.val_long);
  CHECK(train.clips.size() == 20);
  CHECK(vs.clips.size() == 4);
  CHECK(vl.clips.size() == 4);
  CHECK(vl.clips[0].num_frames() == f.cfg.data_gen.spec.num_frames);

  // Long-split clips should show larger frame-to-frame mask displacement.
  auto mean_center_shift = [](const data::Dataset& ds) {
    double acc = 0.0;
    int n = 0;
    for (const auto& clip : ds.clips) {
      for (const auto& tr : clip.instances) {
        for (size_t t = 1; t < tr.boxes.size(); ++t) {
          if (tr.visible[t] && tr.visible[t - 1]) {
            acc += std::fabs(tr.boxes[t][0] - tr.boxes[t - 1][0]) +
                   std::fabs(tr.boxes[t][1] - tr.boxes[t - 1][1]);
            ++n;
          }
        }
      }
    }
    return acc / n;
  };
  CHECK(mean_center_shift(vl) > 1.5 * mean_center_shift(vs));
}

TEST_CASE("baseline smoke training halves the loss (3-seed median)") {
  Fixture& f = fixture();
  std::vector<double> ratios;
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    RunConfig cfg = f.cfg;
    cfg.seed = seed;
    fs::path dir = fresh_dir("smoke_seed" + std::to_string(seed));
    StageOutcome o = train_baseline(cfg, dir.string());
    CHECK(fs::exists(dir / "config.json"));
    CHECK(fs::exists(dir / "log.jsonl"));
    CHECK(fs::exists(o.checkpoint));
    ratios.push_back(o.final_loss / o.initial_loss);
    fs::remove_all(dir);
  }
  std::sort(ratios.begin(), ratios.end());
  CHECK(ratios[1] < 0.5);
}

TEST_CASE("training is deterministic and resume is bit-stable") {
  Fixture& f = fixture();
  RunConfig cfg = f.cfg;
  cfg.optimizer.steps = 30;
  cfg.seed = 9;

  fs::path d1 = fresh_dir("det1"), d2 = fresh_dir("det2");
  StageOutcome o1 = train_baseline(cfg, d1.string());
  StageOutcome o2 = train_baseline(cfg, d2.string());
  CHECK(o1.weights_hash == o2.weights_hash);
  CHECK(ckpt::checkpoint_hash(o1.checkpoint) == ckpt::checkpoint_hash(o2.checkpoint));

  // Continuing from the checkpoint reproduces the first-step loss bit-stably.
  fs::path c1 = fresh_dir("cont1"), c2 = fresh_dir("cont2");
  RunConfig cont = cfg;
  cont.optimizer.steps = 3;
  StageOutcome r1 = train_baseline(cont, c1.string(), o1.checkpoint);
  StageOutcome r2 = train_baseline(cont, c2.string(), o1.checkpoint);
  std::ifstream l1(c1 / "log.jsonl"), l2(c2 / "log.jsonl");
  std::string line1, line2;
  std::getline(l1, line1);
  std::getline(l2, line2);
  CHECK(line1 == line2);
  CHECK(r1.weights_hash == r2.weights_hash);
  for (const fs::path& p : {d1, d2, c1, c2}) fs::remove_all(p);
}

TEST_CASE("lambda-zero weights gate the loss down to classification") {
  Fixture& f = fixture();
  RunConfig cfg = f.cfg;
  cfg.optimizer.steps = 3;
  cfg.weights.lambda1 = 0.0;
  cfg.weights.lambda2 = 0.0;
  cfg.weights.lambda3 = 0.0;
  fs::path dir = fresh_dir("gate");
  train_baseline(cfg, dir.string());
  std::ifstream log(dir / "log.jsonl");
  std::string line;
  while (std::getline(log, line)) {
    json e = json::parse(line);
    CHECK(e.at("total").get<double>() == doctest::Approx(e.at("cls").get<double>()));
  }
  fs::remove_all(dir);
}

TEST_CASE("distillation: frozen teacher, lambda4=0 equivalence, kd decreases") {
  Fixture& f = fixture();
  RunConfig cfg = f.cfg;
  cfg.seed = 4;

  fs::path base_dir = fresh_dir("distill_base");
  StageOutcome base = train_baseline(cfg, base_dir.string());

  fs::path teach_dir = fresh_dir("distill_teacher");
  StageOutcome teacher = train_teacher(cfg, teach_dir.string(), base.checkpoint);

  // lambda4 = 0 and augmentation off: step-identical to continued baseline.
  RunConfig cont = cfg;
  cont.optimizer.steps = 25;
  cont.weights.lambda4 = 0.0;
  fs::path cont_dir = fresh_dir("cont_baseline");
  StageOutcome continued = train_baseline(cont, cont_dir.string(), base.checkpoint);
  fs::path eq_dir = fresh_dir("distill_eq");
  StageOutcome distilled0 =
      distill(cont, eq_dir.string(), base.checkpoint, base.checkpoint, teacher.checkpoint);
  CHECK(distilled0.weights_hash == continued.weights_hash);

  // Teacher checkpoint files byte-identical across distillation.
  uint64_t frame_hash = ckpt::checkpoint_hash(base.checkpoint);
  uint64_t agg_hash = ckpt::checkpoint_hash(teacher.checkpoint);

  RunConfig dcfg = cfg;
  dcfg.optimizer.steps = 150;
  dcfg.weights.lambda4 = 1.0;
  fs::path dist_dir = fresh_dir("distill_kd");
  StageOutcome distilled = distill(dcfg, dist_dir.string(), base.checkpoint, base.checkpoint,
                                   teacher.checkpoint);
  CHECK(ckpt::checkpoint_hash(base.checkpoint) == frame_hash);
  CHECK(ckpt::checkpoint_hash(teacher.checkpoint) == agg_hash);

  // The kd term falls over the smoke run.
  std::ifstream log(dist_dir / "log.jsonl");
  std::string line;
  double first_kd = 0, last_kd = 0;
  int n = 0;
  while (std::getline(log, line)) {
    json e = json::parse(line);
    double kd = e.at("kd").get<double>();
    if (n < 20) first_kd += kd;
    if (n >= dcfg.optimizer.steps - 20) last_kd += kd;
    ++n;
  }
  CHECK(n == dcfg.optimizer.steps);
  CHECK(last_kd < first_kd);

  // Smoke-trained model: different queries decode to generally different
  // masks (mean pairwise IoU of thresholded masks below 0.9).
  model::VisModel m(cfg.model, 0);
  ckpt::load_checkpoint(distilled.checkpoint, m.parameters());
  data::Dataset ds = data::load_dataset(cfg.val_short);
  model::FrameOutputs out = m.forward_detached(model::frame_to_tensor(ds.clips[0].frames[0]));
  int N = cfg.model.num_queries;
  int P = out.mask_h * out.mask_w;
  double iou_acc = 0.0;
  int pairs = 0;
  for (int a = 0; a < N; ++a) {
    for (int b = a + 1; b < N; ++b) {
      int64_t inter = 0, uni = 0;
      for (int p = 0; p < P; ++p) {
        bool ma = out.mask_logits.at(a, p) > 0;
        bool mb = out.mask_logits.at(b, p) > 0;
        inter += (ma && mb) ? 1 : 0;
        uni += (ma || mb) ? 1 : 0;
      }
      iou_acc += uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
      ++pairs;
    }
  }
  CHECK(iou_acc / pairs < 0.9);

  for (const fs::path& p : {base_dir, teach_dir, cont_dir, eq_dir, dist_dir}) fs::remove_all(p);
}

TEST_CASE("augmented training stays finite and reproducible") {
  Fixture& f = fixture();
  RunConfig cfg = f.cfg;
  cfg.optimizer.steps = 25;
  cfg.augment.enabled = true;
  cfg.seed = 6;
  fs::path d1 = fresh_dir("aug1"), d2 = fresh_dir("aug2");
  StageOutcome o1 = train_baseline(cfg, d1.string());
  StageOutcome o2 = train_baseline(cfg, d2.string());
  CHECK(o1.weights_hash == o2.weights_hash);
  // At least one step actually pasted.
  std::ifstream log(d1 / "log.jsonl");
  std::string line;
  bool any_paste = false;
  while (std::getline(log, line)) {
    any_paste = any_paste || json::parse(line).at("augmented").get<bool>();
  }
  CHECK(any_paste);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("track + eval produce a self-consistent metrics file") {
  Fixture& f = fixture();
  RunConfig cfg = f.cfg;
  cfg.optimizer.steps = 120;
  cfg.seed = 12;
  fs::path tdir = fresh_dir("trackeval_train");
  StageOutcome o = train_baseline(cfg, tdir.string());

  fs::path pdir = fresh_dir("trackeval_pred");
  json metrics = evaluate_checkpoint(cfg, o.checkpoint, cfg.val_short, pdir.string());
  CHECK(metrics.at("mAP").get<double>() >= 0.0);
  CHECK(metrics.at("mAP").get<double>() <= 1.0);
  CHECK(fs::exists(pdir / "metrics.json"));

  // Ground truth fed back as predictions scores a perfect mAP.
  data::Dataset gt = data::load_dataset(cfg.val_short);
  fs::path gdir = fresh_dir("trackeval_gtpred");
  fs::create_directories(gdir);
  for (const auto& clip : gt.clips) {
    std::vector<track::TrackResult> tracks;
    for (const auto& tr : clip.instances) {
      track::TrackResult r;
      r.instance_id = tr.instance_id;
      r.class_id = tr.class_id;
      r.score = 1.0;
      r.masks = tr.masks;
      tracks.push_back(r);
    }
    track::save_results(gdir.string(), clip, tracks);
  }
  json perfect = evaluate_predictions(gdir.string(), cfg.val_short);
  CHECK(perfect.at("mAP").get<double>() == doctest::Approx(1.0));

  fs::remove_all(tdir);
  fs::remove_all(pdir);
  fs::remove_all(gdir);
}

TEST_SUITE_END();
