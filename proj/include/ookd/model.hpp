#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "ookd/layers.hpp"
#include "ookd/png_io.hpp"

namespace ookd::model {

struct ModelConfig {
  int num_queries = 16;  // N
  int hidden_dim = 64;   // C
  int num_classes = 7;   // real classes; the class head adds a no-object slot
  int decoder_layers = 2;
  int attention_heads = 4;
  std::vector<int> backbone_widths{16, 32, 64};
  int mask_dim = 8;
  int mask_head_hidden = 8;
  int input_height = 64;
  int input_width = 64;

  int logits_dim() const { return num_classes + 1; }
  int no_object_index() const { return num_classes; }

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig& o) const;
};

// One frame's decoded queries and head outputs, live on a tape.
struct FrameQuerySet {
  nn::Var features;       // N x C
  nn::Var class_logits;   // N x (classes+1)
  nn::Var boxes;          // N x 4, cxcywh in (0,1)
  nn::Var mask_logits;    // N x (H/4 * W/4)
  nn::Var embeddings;     // N x C, unit rows
  nn::Var mask_features;  // (H/4 * W/4) x (mask_dim + 2), shared by all queries
  int mask_h = 0, mask_w = 0;
};

// Detached copy for frozen-teacher use.
struct FrameOutputs {
  nn::Tensor features;
  nn::Tensor class_logits;
  nn::Tensor boxes;
  nn::Tensor mask_logits;
  nn::Tensor embeddings;
  nn::Tensor mask_features;
  int mask_h = 0, mask_w = 0;
};

nn::Tensor frame_to_tensor(const Image& frame);

// Per-frame query-based detector/segmenter: convolutional backbone, plain
// attention decoder over N learnable queries, dynamic-conv mask head,
// class/box heads, and a contrastive embedding head.
class VisModel {
 public:
  VisModel(const ModelConfig& cfg, uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }

  // Full forward pass for one frame (3 x H x W tensor).
  FrameQuerySet forward(nn::Tape& t, const nn::Tensor& frame) const;
  FrameOutputs forward_detached(const nn::Tensor& frame) const;

  // Contrastive embedding head alone (used for teacher video queries too).
  nn::Var contrastive_embed(nn::Tape& t, nn::Var features) const;

  // Dynamic mask head on externally supplied mask features.
  nn::Var mask_head(nn::Tape& t, nn::Var queries, nn::Var mask_features) const;

  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;
  uint64_t weights_hash() const;

 private:
  nn::Var backbone_tokens(nn::Tape& t, const nn::Tensor& frame, nn::Var* mask_feat) const;
  nn::Var decode(nn::Tape& t, nn::Var tokens) const;

  ModelConfig cfg_;
  nn::Conv2d stem_, conv2a_, conv2b_, conv3a_, conv3b_;
  nn::Linear token_proj_;
  nn::Conv2d mask_proj_;
  nn::Parameter query_embed_;
  struct DecoderLayer {
    nn::MultiHeadAttention self_attn, cross_attn;
    nn::LayerNorm norm_self, norm_cross, norm_ffn;
    nn::Linear ffn1, ffn2;
    nn::Parameter cross_bias;  // per-query spatial attention prior
  };
  std::vector<DecoderLayer> layers_;
  nn::LayerNorm final_norm_;
  nn::Linear class_head_;
  nn::Mlp box_head_;
  nn::Linear mask_controller_;
  nn::Mlp embed_head_;
  nn::Tensor pos_encoding_;  // (H/8*W/8) x C, fixed sine
};

// Fixed 2D sine positional encoding for an h x w token grid.
nn::Tensor sine_position_encoding(int h, int w, int dim);

// Per-query soft-mask moments (centroid and spread, normalized coords) of a
// [N, h*w] mask-logit matrix: returns [N, 4] = (mx, my, sx, sy).
nn::Var mask_box_stats(nn::Tape& t, nn::Var mask_logits, int h, int w);

// log(p / (1 - p)) after clamping p into [lo, hi].
nn::Var logit_clamped(nn::Tape& t, nn::Var p, double lo = 0.02, double hi = 0.98);

// Per-query dynamic two-layer conv parameters unpacked from a controller row.
int dynamic_mask_param_count(int in_dim, int hidden);

}  // namespace ookd::model
