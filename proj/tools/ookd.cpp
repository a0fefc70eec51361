#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ookd/augment.hpp"
#include "ookd/checkpoint.hpp"
#include "ookd/pipeline.hpp"
#include "ookd/plot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ookd;

namespace {

struct CommonArgs {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "JSON config file");
  cmd->add_option("--set", args.overrides, "Override config values: key.path=value");
}

std::string default_run_dir(const pipeline::RunConfig& cfg, const std::string& stage) {
  return (fs::path(pipeline::runs_dir()) /
          (stage + "-seed" + std::to_string(cfg.seed)))
      .string();
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Offline-to-online knowledge distillation for video instance segmentation"};
  app.require_subcommand(1);

  // gen-data
  CommonArgs gen_args;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Generate train/val_short/val_long datasets");
  add_common(gen, gen_args);
  gen->add_option("--out", gen_out, "Output root directory")->required();

  // stats
  CommonArgs stats_args;
  std::string stats_data;
  auto* stats = app.add_subcommand("stats", "Print class frequencies and paste probabilities");
  add_common(stats, stats_args);
  stats->add_option("--data", stats_data, "Dataset root")->required();

  // train-baseline
  CommonArgs tb_args;
  std::string tb_out, tb_init;
  auto* tb = app.add_subcommand("train-baseline", "Train the per-frame student model");
  add_common(tb, tb_args);
  tb->add_option("--out", tb_out, "Run directory");
  tb->add_option("--init", tb_init, "Warm-start checkpoint");

  // train-teacher
  CommonArgs tt_args;
  std::string tt_out, tt_baseline;
  auto* tt = app.add_subcommand("train-teacher", "Train the offline aggregator on a frozen baseline");
  add_common(tt, tt_args);
  tt->add_option("--baseline", tt_baseline, "Baseline checkpoint")->required();
  tt->add_option("--out", tt_out, "Run directory");

  // distill
  CommonArgs di_args;
  std::string di_out, di_init, di_teacher, di_agg;
  auto* di = app.add_subcommand("distill", "Distill offline knowledge into the student");
  add_common(di, di_args);
  di->add_option("--student-init", di_init, "Student warm-start checkpoint")->required();
  di->add_option("--teacher", di_teacher, "Teacher frame-model checkpoint")->required();
  di->add_option("--aggregator", di_agg, "Teacher aggregator checkpoint")->required();
  di->add_option("--out", di_out, "Run directory");

  // track
  CommonArgs tr_args;
  std::string tr_ckpt, tr_data, tr_out;
  auto* tr = app.add_subcommand("track", "Run online inference over a dataset");
  add_common(tr, tr_args);
  tr->add_option("--ckpt", tr_ckpt, "Model checkpoint")->required();
  tr->add_option("--data", tr_data, "Dataset root")->required();
  tr->add_option("--out", tr_out, "Prediction output directory")->required();

  // eval
  std::string ev_pred, ev_gt, ev_out;
  auto* ev = app.add_subcommand("eval", "Evaluate predictions against ground truth");
  ev->add_option("--pred", ev_pred, "Prediction directory")->required();
  ev->add_option("--gt", ev_gt, "Ground-truth dataset root")->required();
  ev->add_option("--out", ev_out, "Metrics JSON output path");

  // ablate
  CommonArgs ab_args;
  std::string ab_out;
  auto* ab = app.add_subcommand("ablate", "Run the staged ablation grid");
  add_common(ab, ab_args);
  ab->add_option("--out", ab_out, "Output directory");

  // plot-similarity
  CommonArgs ps_args;
  std::vector<std::string> ps_ckpts;
  std::string ps_data, ps_out;
  uint64_t ps_seed = 0;
  auto* ps = app.add_subcommand("plot-similarity",
                                "Histogram of same-instance embedding similarity");
  add_common(ps, ps_args);
  ps->add_option("--ckpt", ps_ckpts, "Checkpoints (baseline first, distilled second)")
      ->expected(1, 2)
      ->required();
  ps->add_option("--data", ps_data, "Dataset root")->required();
  ps->add_option("--out", ps_out, "Output PNG path")->required();
  ps->add_option("--seed", ps_seed, "Sampling seed");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    pipeline::RunConfig cfg = pipeline::load_config(gen_args.config, gen_args.overrides);
    pipeline::generate_datasets(cfg.data_gen, gen_out);
    std::printf("generated datasets under %s\n", gen_out.c_str());
    return 0;
  }

  if (stats->parsed()) {
    pipeline::RunConfig cfg = pipeline::load_config(stats_args.config, stats_args.overrides);
    data::Dataset ds = data::load_dataset(stats_data);
    data::DatasetStats st = data::compute_class_stats(ds.clips, ds.num_classes());
    augment::ClassStats cs =
        augment::make_class_stats(st.p, cfg.augment.k, cfg.augment.minor_threshold);
    std::printf("%-20s %8s %10s %8s %7s\n", "class", "count", "p_c", "p_s", "minor");
    for (int c = 0; c < ds.num_classes(); ++c) {
      std::printf("%-20s %8lld %10.4f %8.4f %7s\n",
                  ds.classes[static_cast<size_t>(c)].name.c_str(),
                  static_cast<long long>(st.counts[static_cast<size_t>(c)]),
                  st.p[static_cast<size_t>(c)], cs.p_s[static_cast<size_t>(c)],
                  st.p[static_cast<size_t>(c)] < cfg.augment.minor_threshold ? "yes" : "no");
    }
    return 0;
  }

  if (tb->parsed()) {
    pipeline::RunConfig cfg = pipeline::load_config(tb_args.config, tb_args.overrides);
    std::string out = tb_out.empty() ? default_run_dir(cfg, "baseline") : tb_out;
    pipeline::StageOutcome o = pipeline::train_baseline(cfg, out, tb_init);
    std::printf("baseline trained: %s (loss %.4f -> %.4f)\n", o.checkpoint.c_str(),
                o.initial_loss, o.final_loss);
    return 0;
  }

  if (tt->parsed()) {
    pipeline::RunConfig cfg = pipeline::load_config(tt_args.config, tt_args.overrides);
    std::string out = tt_out.empty() ? default_run_dir(cfg, "teacher") : tt_out;
    pipeline::StageOutcome o = pipeline::train_teacher(cfg, out, tt_baseline);
    std::printf("aggregator trained: %s (loss %.4f -> %.4f)\n", o.checkpoint.c_str(),
                o.initial_loss, o.final_loss);
    return 0;
  }

  if (di->parsed()) {
    pipeline::RunConfig cfg = pipeline::load_config(di_args.config, di_args.overrides);
    std::string out = di_out.empty() ? default_run_dir(cfg, "distill") : di_out;
    pipeline::StageOutcome o = pipeline::distill(cfg, out, di_init, di_teacher, di_agg);
    std::printf("distilled student: %s (loss %.4f -> %.4f, kd %.4f)\n", o.checkpoint.c_str(),
                o.initial_loss, o.final_loss, o.final_kd);
    return 0;
  }

  if (tr->parsed()) {
    pipeline::RunConfig cfg = pipeline::load_config(tr_args.config, tr_args.overrides);
    pipeline::track_dataset(cfg, tr_ckpt, tr_data, tr_out);
    std::printf("wrote predictions to %s\n", tr_out.c_str());
    return 0;
  }

  if (ev->parsed()) {
    json metrics = pipeline::evaluate_predictions(ev_pred, ev_gt);
    if (!ev_out.empty()) {
      std::ofstream f(ev_out);
      f << metrics.dump(2) << "\n";
    }
    std::printf("mAP %.4f  AP50 %.4f  AP75 %.4f  AR1 %.4f  AR10 %.4f\n",
                metrics.at("mAP").get<double>(), metrics.at("AP50").get<double>(),
                metrics.at("AP75").get<double>(), metrics.at("AR1").get<double>(),
                metrics.at("AR10").get<double>());
    return 0;
  }

  if (ab->parsed()) {
    pipeline::RunConfig cfg = pipeline::load_config(ab_args.config, ab_args.overrides);
    std::string out = ab_out.empty() ? default_run_dir(cfg, "ablation") : ab_out;
    json result = pipeline::run_ablation(cfg, out);
    std::ifstream md(fs::path(out) / "ablation.md");
    std::string line;
    while (std::getline(md, line)) std::printf("%s\n", line.c_str());
    return 0;
  }

  if (ps->parsed()) {
    pipeline::RunConfig cfg = pipeline::load_config(ps_args.config, ps_args.overrides);
    evalkit::SimilarityHistogram a =
        pipeline::checkpoint_similarity(cfg, ps_ckpts[0], ps_data, ps_seed);
    evalkit::SimilarityHistogram b =
        ps_ckpts.size() > 1 ? pipeline::checkpoint_similarity(cfg, ps_ckpts[1], ps_data, ps_seed)
                            : a;
    plot::render_histogram_overlay(a, b, ps_out);
    json bins = {{"first", a.to_json()}, {"second", b.to_json()}};
    std::ofstream jf(ps_out + ".json");
    jf << bins.dump(2) << "\n";
    std::printf("similarity means: %.4f vs %.4f; wrote %s\n", a.mean, b.mean, ps_out.c_str());
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return 3;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
