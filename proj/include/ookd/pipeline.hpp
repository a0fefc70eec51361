#pragma once

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "ookd/augment.hpp"
#include "ookd/dataset.hpp"
#include "ookd/evalkit.hpp"
#include "ookd/losses.hpp"
#include "ookd/model.hpp"
#include "ookd/teacher.hpp"
#include "ookd/tracker.hpp"

namespace ookd::pipeline {

struct DataGenConfig {
  int train_clips = 300;
  int val_clips = 60;  // per split
  data::ClipSpec spec;
  double long_stride = 4.0;  // long split subsamples at this stride
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static DataGenConfig from_json(const nlohmann::json& j);
};

struct OptimizerConfig {
  double lr = 1e-4;
  int steps = 1000;
  int frames_per_clip = 2;
  int clips_per_batch = 1;
  int pair_window = 3;  // reference frame within +-window of the key frame

  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

struct AugmentSettings {
  bool enabled = false;
  double k = 0.7;
  double minor_threshold = 0.10;
  std::string mode = "minor";  // minor | uniform (ablation)
  int max_pastes = 1;

  nlohmann::json to_json() const;
  static AugmentSettings from_json(const nlohmann::json& j);
};

struct QfaSettings {
  double lambda_b = 2.0;
  std::string mode = "hungarian";  // hungarian | argmin

  nlohmann::json to_json() const;
  static QfaSettings from_json(const nlohmann::json& j);
};

struct DistillSettings {
  std::string pairing = "qfa";  // qfa | index (kd without query association)
  std::string cache_dir;        // optional on-disk knowledge cache

  nlohmann::json to_json() const;
  static DistillSettings from_json(const nlohmann::json& j);
};

struct TeacherSettings {
  int steps = 600;
  double lr = 1e-3;
  int frames_per_sample = 4;
  teacher::AggregatorConfig aggregator;

  nlohmann::json to_json() const;
  static TeacherSettings from_json(const nlohmann::json& j);
};

struct AblationSettings {
  std::vector<std::string> variants{"baseline", "minor_paste", "kd_no_qfa", "kd_qfa", "both"};
  std::vector<uint64_t> seeds{1, 2, 3};
  int stage2_steps = 800;
  bool parallel = true;

  nlohmann::json to_json() const;
  static AblationSettings from_json(const nlohmann::json& j);
};

struct RunConfig {
  std::string dataset;    // training split root
  std::string val_short;  // evaluation split roots
  std::string val_long;
  model::ModelConfig model;
  losses::LossWeights weights;
  QfaSettings qfa;
  AugmentSettings augment;
  track::TrackerConfig tracker;
  OptimizerConfig optimizer;
  TeacherSettings teacher;
  DistillSettings distill;
  DataGenConfig data_gen;
  AblationSettings ablation;
  uint64_t seed = 0;
  std::string stage;  // informational tag written into run metadata

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  void validate() const;
};

RunConfig load_config(const std::string& path,
                      const std::vector<std::string>& overrides = {});
// Applies one "dotted.path=value" override onto a config JSON.
void apply_override(nlohmann::json& j, const std::string& assignment);

std::string runs_dir();  // $OOKD_RUNS_DIR or ./runs

// --- data ---
void generate_datasets(const DataGenConfig& gc, const std::string& out_root);

// --- training stages ---
struct StageOutcome {
  std::string checkpoint;  // final model checkpoint path
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double final_kd = 0.0;
  uint64_t weights_hash = 0;
};

// Baseline student training (optionally warm-started from a checkpoint).
StageOutcome train_baseline(const RunConfig& cfg, const std::string& run_dir,
                            const std::string& init_checkpoint = "");

// Aggregator training on top of a frozen baseline checkpoint.
StageOutcome train_teacher(const RunConfig& cfg, const std::string& run_dir,
                           const std::string& baseline_checkpoint);

// Offline-to-online distillation: total loss = idol + lambda4 * kd.
StageOutcome distill(const RunConfig& cfg, const std::string& run_dir,
                     const std::string& student_init, const std::string& teacher_checkpoint,
                     const std::string& aggregator_checkpoint);

// --- inference + evaluation ---
void track_dataset(const RunConfig& cfg, const std::string& checkpoint,
                   const std::string& dataset_root, const std::string& out_dir);

nlohmann::json evaluate_predictions(const std::string& pred_dir,
                                    const std::string& gt_root);

// Track + evaluate a checkpoint on one split; returns the metrics JSON.
nlohmann::json evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint,
                                   const std::string& dataset_root,
                                   const std::string& out_dir);

// --- ablation ---
// Runs the staged grid over cfg.ablation.variants and seeds; writes
// ablation.json and ablation.md under run_dir and returns the JSON.
nlohmann::json run_ablation(const RunConfig& cfg, const std::string& run_dir);

// Mean same-instance similarity of a checkpoint on a dataset.
evalkit::SimilarityHistogram checkpoint_similarity(const RunConfig& cfg,
                                                   const std::string& checkpoint,
                                                   const std::string& dataset_root,
                                                   uint64_t seed);

}  // namespace ookd::pipeline
