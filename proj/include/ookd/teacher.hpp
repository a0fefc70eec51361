#pragma once

#include <functional>
#include <vector>

#include "ookd/losses.hpp"
#include "ookd/model.hpp"
#include "ookd/qfa.hpp"

namespace ookd::teacher {

struct AggregatorConfig {
  int encoder_layers = 2;
  int decoder_layers = 2;
  // Off by default: the aggregation is then permutation-invariant over frames.
  bool temporal_position_encoding = false;

  nlohmann::json to_json() const;
  static AggregatorConfig from_json(const nlohmann::json& j);
  bool operator==(const AggregatorConfig& o) const;
};

// Video-level distilled state of one clip under a frozen teacher.
struct OfflineKnowledge {
  nn::Tensor queries;             // N x C
  nn::Tensor embeddings;          // N x C, unit rows
  nn::Tensor video_class_logits;  // N x (classes+1)
  nn::Tensor per_frame_boxes;     // N x T x 4
};

// Object encoder (temporal self-attention over all frames' queries) plus an
// object decoder holding N learnable video-level queries.
class Aggregator {
 public:
  Aggregator(const model::ModelConfig& mc, const AggregatorConfig& ac, uint64_t seed);

  const AggregatorConfig& config() const { return acfg_; }
  const model::ModelConfig& model_config() const { return mcfg_; }

  // tokens: [T*N, C] stacked frame queries (frame-major).
  nn::Var encode(nn::Tape& t, nn::Var tokens, int num_frames) const;
  nn::Var aggregate(nn::Tape& t, nn::Var frame_queries, int num_frames) const;

  nn::Var video_class_logits(nn::Tape& t, nn::Var video_queries) const;
  // Boxes of every video query on one frame, conditioned on the frame's mean
  // query feature and the query's own mask moments on that frame.
  nn::Var frame_boxes(nn::Tape& t, nn::Var video_queries, const nn::Tensor& frame_ctx,
                      nn::Var frame_mask_logits) const;
  nn::Var frame_mask_logits(nn::Tape& t, nn::Var video_queries, nn::Var mask_features) const;

  std::vector<nn::Parameter*> parameters();
  uint64_t weights_hash() const;

 private:
  model::ModelConfig mcfg_;
  AggregatorConfig acfg_;
  std::vector<nn::SelfAttentionBlock> encoder_;
  nn::Parameter video_query_embed_;
  struct DecoderLayer {
    nn::MultiHeadAttention self_attn, cross_attn;
    nn::LayerNorm norm_self, norm_cross, norm_ffn;
    nn::Linear ffn1, ffn2;
  };
  std::vector<DecoderLayer> layers_;
  nn::LayerNorm final_norm_;
  nn::Linear class_head_;
  nn::Mlp box_head_;
  nn::Linear mask_controller_;
};

// Runs the frozen frame model over every frame, aggregates, and applies the
// frozen contrastive embedding to the video queries. No gradients anywhere.
OfflineKnowledge build_offline_knowledge(const data::VideoClip& clip,
                                         const model::VisModel& frame_model,
                                         const Aggregator& agg);

struct VideoAssignment {
  std::vector<int> sigma;      // sigma[m]: teacher query index for video track m
  std::vector<int> track_ids;  // instance ids in the same order as sigma
};

// Teacher-side QFA: class cost on video logits plus lambda_b times the box
// cost averaged over each track's visible frames.
VideoAssignment match_video(const OfflineKnowledge& k, const data::VideoClip& clip,
                            double lambda_b, qfa::MatchMode mode);

struct AggregatorTrainOptions {
  int steps = 600;
  double lr = 1e-3;
  int frames_per_sample = 4;
  double lambda_b = 2.0;
  losses::LossWeights weights;
  uint64_t seed = 0;
  std::function<void(int, double)> on_step;
};

struct TrainStats {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int steps = 0;
};

// Trains only the aggregator; the frame model stays frozen (asserted by
// checking its gradients stay identically zero).
TrainStats train_aggregator(const std::vector<data::VideoClip>& clips,
                            model::VisModel& frame_model, Aggregator& agg,
                            const AggregatorTrainOptions& opts);

}  // namespace ookd::teacher
