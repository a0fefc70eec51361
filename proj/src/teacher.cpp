#include "ookd/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace ookd::teacher {

using nn::Tape;
using nn::Tensor;
using nn::Var;

nlohmann::json AggregatorConfig::to_json() const {
  return {{"encoder_layers", encoder_layers},
          {"decoder_layers", decoder_layers},
          {"temporal_position_encoding", temporal_position_encoding}};
}

AggregatorConfig AggregatorConfig::from_json(const nlohmann::json& j) {
  AggregatorConfig c;
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.temporal_position_encoding = j.at("temporal_position_encoding").get<bool>();
  return c;
}

bool AggregatorConfig::operator==(const AggregatorConfig& o) const {
  return to_json() == o.to_json();
}

Aggregator::Aggregator(const model::ModelConfig& mc, const AggregatorConfig& ac,
                       uint64_t seed)
    : mcfg_(mc), acfg_(ac) {
  RngStream rng(seed);
  const int C = mcfg_.hidden_dim;
  for (int l = 0; l < acfg_.encoder_layers; ++l) {
    encoder_.emplace_back("aggregator.encoder" + std::to_string(l), C,
                          mcfg_.attention_heads, 2 * C, rng);
  }
  video_query_embed_ = nn::Parameter("aggregator.video_query_embed",
                                     Tensor({mcfg_.num_queries, C}));
  for (int64_t i = 0; i < video_query_embed_.value.numel(); ++i) {
    video_query_embed_.value[i] = rng.normal(0.0, 0.5);
  }
  layers_.resize(static_cast<size_t>(acfg_.decoder_layers));
  for (int l = 0; l < acfg_.decoder_layers; ++l) {
    std::string p = "aggregator.decoder" + std::to_string(l);
    DecoderLayer& dl = layers_[static_cast<size_t>(l)];
    dl.self_attn = nn::MultiHeadAttention(p + ".self", C, mcfg_.attention_heads, rng);
    dl.cross_attn = nn::MultiHeadAttention(p + ".cross", C, mcfg_.attention_heads, rng);
    dl.norm_self = nn::LayerNorm(p + ".norm_self", C);
    dl.norm_cross = nn::LayerNorm(p + ".norm_cross", C);
    dl.norm_ffn = nn::LayerNorm(p + ".norm_ffn", C);
    dl.ffn1 = nn::Linear(p + ".ffn1", C, 2 * C, rng);
    dl.ffn2 = nn::Linear(p + ".ffn2", 2 * C, C, rng);
  }
  final_norm_ = nn::LayerNorm("aggregator.final_norm", C);
  class_head_ = nn::Linear("aggregator.class_head", C, mcfg_.logits_dim(), rng);
  box_head_ = nn::Mlp("aggregator.box_head", 2 * C + 4, C, 4, rng);
  int dyn = model::dynamic_mask_param_count(mcfg_.mask_dim + 2, mcfg_.mask_head_hidden);
  mask_controller_ = nn::Linear("aggregator.mask_controller", C, dyn, rng);
}

Var Aggregator::encode(Tape& t, Var tokens, int num_frames) const {
  const int C = mcfg_.hidden_dim;
  int total = static_cast<int>(tokens.val().rows());
  if (num_frames < 1 || total % num_frames != 0) {
    throw ValidationError("Aggregator::encode: token count not divisible by frames");
  }
  Var x = tokens;
  if (acfg_.temporal_position_encoding) {
    int per_frame = total / num_frames;
    Tensor pe({total, C});
    for (int f = 0; f < num_frames; ++f) {
      for (int q = 0; q < per_frame; ++q) {
        for (int i = 0; i < C / 2; ++i) {
          double freq = std::pow(10000.0, -2.0 * i / C);
          pe.at(f * per_frame + q, 2 * i) = std::sin(f * freq);
          pe.at(f * per_frame + q, 2 * i + 1) = std::cos(f * freq);
        }
      }
    }
    x = nn::add(x, t.leaf(pe));
  }
  for (const nn::SelfAttentionBlock& block : encoder_) x = block(t, x);
  return x;
}

Var Aggregator::aggregate(Tape& t, Var frame_queries, int num_frames) const {
  auto& self = const_cast<Aggregator&>(*this);
  Var mem = encode(t, frame_queries, num_frames);
  Var x = t.param(self.video_query_embed_);
  for (const DecoderLayer& dl : layers_) {
    Var h = dl.norm_self(t, x);
    x = nn::add(x, dl.self_attn(t, h, h, h));
    x = nn::add(x, dl.cross_attn(t, dl.norm_cross(t, x), mem, mem));
    x = nn::add(x, dl.ffn2(t, nn::relu(dl.ffn1(t, dl.norm_ffn(t, x)))));
  }
  return final_norm_(t, x);
}

Var Aggregator::video_class_logits(Tape& t, Var video_queries) const {
  return class_head_(t, video_queries);
}

Var Aggregator::frame_boxes(Tape& t, Var video_queries, const Tensor& frame_ctx,
                            Var frame_mask_logits_var) const {
  int N = static_cast<int>(video_queries.val().rows());
  Tensor ones({N, 1});
  ones.fill(1.0);
  Var ctx = nn::matmul(t.leaf(ones), t.leaf(frame_ctx));  // broadcast 1 x C to N rows
  Var stats = model::mask_box_stats(t, frame_mask_logits_var, mcfg_.input_height / 4,
                                    mcfg_.input_width / 4);
  Var residual = box_head_(t, nn::concat_cols({video_queries, ctx, stats}));
  return nn::sigmoid(nn::add(residual, model::logit_clamped(t, stats)));
}

Var Aggregator::frame_mask_logits(Tape& t, Var video_queries, Var mask_features) const {
  auto& self = const_cast<Aggregator&>(*this);
  int in_dim = mcfg_.mask_dim + 2;
  int hidden = mcfg_.mask_head_hidden;
  Var controller = mask_controller_(t, video_queries);
  int N = static_cast<int>(video_queries.val().rows());
  std::vector<Var> rows;
  for (int q = 0; q < N; ++q) {
    Var row = nn::slice_rows(controller, q, 1);
    int off = 0;
    Var w1 = nn::reshape(nn::slice_cols(row, off, in_dim * hidden), {in_dim, hidden});
    off += in_dim * hidden;
    Var b1 = nn::slice_cols(row, off, hidden);
    off += hidden;
    Var w2 = nn::reshape(nn::slice_cols(row, off, hidden), {hidden, 1});
    off += hidden;
    Var b2 = nn::slice_cols(row, off, 1);
    Var h = nn::relu(nn::add_row(nn::matmul(mask_features, w1), b1));
    rows.push_back(nn::transpose(nn::add_row(nn::matmul(h, w2), b2)));
  }
  (void)self;
  return nn::concat_rows(rows);
}

std::vector<nn::Parameter*> Aggregator::parameters() {
  std::vector<nn::Parameter*> ps;
  for (nn::SelfAttentionBlock& b : encoder_) b.collect(ps);
  ps.push_back(&video_query_embed_);
  for (DecoderLayer& dl : layers_) {
    dl.self_attn.collect(ps);
    dl.cross_attn.collect(ps);
    dl.norm_self.collect(ps);
    dl.norm_cross.collect(ps);
    dl.norm_ffn.collect(ps);
    dl.ffn1.collect(ps);
    dl.ffn2.collect(ps);
  }
  final_norm_.collect(ps);
  class_head_.collect(ps);
  box_head_.collect(ps);
  mask_controller_.collect(ps);
  return ps;
}

uint64_t Aggregator::weights_hash() const {
  auto ps = const_cast<Aggregator*>(this)->parameters();
  return nn::param_hash(ps);
}

namespace {

// Mean of each frame's query features: T x C.
Tensor frame_contexts(const std::vector<Tensor>& frame_features) {
  int T = static_cast<int>(frame_features.size());
  int C = static_cast<int>(frame_features[0].cols());
  Tensor ctx({T, C});
  for (int f = 0; f < T; ++f) ctx.mat().row(f) = frame_features[static_cast<size_t>(f)].mat().colwise().mean();
  return ctx;
}

Tensor stack_rows(const std::vector<Tensor>& mats) {
  int rows = 0;
  int cols = static_cast<int>(mats[0].cols());
  for (const Tensor& m : mats) rows += static_cast<int>(m.rows());
  Tensor out({rows, cols});
  int off = 0;
  for (const Tensor& m : mats) {
    out.mat().middleRows(off, static_cast<int>(m.rows())) = m.mat();
    off += static_cast<int>(m.rows());
  }
  return out;
}

}  // namespace

OfflineKnowledge build_offline_knowledge(const data::VideoClip& clip,
                                         const model::VisModel& frame_model,
                                         const Aggregator& agg) {
  if (clip.num_frames() < 1) throw ValidationError("build_offline_knowledge: empty clip");
  std::vector<Tensor> feats;
  std::vector<Tensor> mask_feats;
  feats.reserve(static_cast<size_t>(clip.num_frames()));
  for (int f = 0; f < clip.num_frames(); ++f) {
    model::FrameOutputs out = frame_model.forward_detached(
        model::frame_to_tensor(clip.frames[static_cast<size_t>(f)]));
    feats.push_back(out.features);
    mask_feats.push_back(out.mask_features);
  }
  Tensor tokens = stack_rows(feats);
  Tensor ctx = frame_contexts(feats);

  Tape t;
  Var vq = agg.aggregate(t, t.leaf(tokens), clip.num_frames());
  OfflineKnowledge k;
  k.queries = vq.val().clone();
  k.video_class_logits = agg.video_class_logits(t, vq).val().clone();
  k.embeddings = frame_model.contrastive_embed(t, vq).val().clone();
  int N = agg.model_config().num_queries;
  int T = clip.num_frames();
  k.per_frame_boxes = Tensor({N, T, 4});
  for (int f = 0; f < T; ++f) {
    Tensor fc({1, agg.model_config().hidden_dim});
    fc.vec() = ctx.mat().row(f);
    Var fm = agg.frame_mask_logits(t, vq, t.leaf(mask_feats[static_cast<size_t>(f)]));
    Tensor boxes = agg.frame_boxes(t, vq, fc, fm).val();
    for (int n = 0; n < N; ++n) {
      for (int k4 = 0; k4 < 4; ++k4) {
        k.per_frame_boxes[static_cast<int64_t>(n) * T * 4 + static_cast<int64_t>(f) * 4 + k4] =
            boxes.at(n, k4);
      }
    }
  }
  return k;
}

VideoAssignment match_video(const OfflineKnowledge& k, const data::VideoClip& clip,
                            double lambda_b, qfa::MatchMode mode) {
  int N = static_cast<int>(k.queries.rows());
  int T = clip.num_frames();
  std::vector<const data::InstanceTrack*> tracks;
  for (const data::InstanceTrack& tr : clip.instances) {
    bool visible = false;
    for (uint8_t v : tr.visible) visible = visible || v;
    if (visible) tracks.push_back(&tr);
  }
  VideoAssignment va;
  if (tracks.empty()) return va;

  int M = static_cast<int>(tracks.size());
  Tensor S({N, M});
  for (int n = 0; n < N; ++n) {
    Tensor logit_row({1, static_cast<int>(k.video_class_logits.cols())});
    logit_row.vec() = k.video_class_logits.mat().row(n);
    for (int m = 0; m < M; ++m) {
      const data::InstanceTrack& tr = *tracks[static_cast<size_t>(m)];
      double cost = qfa::class_cost(logit_row, tr.class_id);
      if (lambda_b != 0.0) {
        double box_acc = 0.0;
        int vis = 0;
        for (int f = 0; f < T; ++f) {
          if (!tr.visible[static_cast<size_t>(f)]) continue;
          data::Box pb{
              k.per_frame_boxes[static_cast<int64_t>(n) * T * 4 + static_cast<int64_t>(f) * 4 + 0],
              k.per_frame_boxes[static_cast<int64_t>(n) * T * 4 + static_cast<int64_t>(f) * 4 + 1],
              k.per_frame_boxes[static_cast<int64_t>(n) * T * 4 + static_cast<int64_t>(f) * 4 + 2],
              k.per_frame_boxes[static_cast<int64_t>(n) * T * 4 + static_cast<int64_t>(f) * 4 + 3]};
          box_acc += qfa::box_cost(pb, tr.boxes[static_cast<size_t>(f)]);
          ++vis;
        }
        cost += lambda_b * box_acc / std::max(1, vis);
      }
      S.at(n, m) = cost;
    }
  }
  qfa::Assignment a = qfa::match(S, mode);
  va.sigma = a.sigma;
  for (const data::InstanceTrack* tr : tracks) va.track_ids.push_back(tr->instance_id);
  return va;
}

TrainStats train_aggregator(const std::vector<data::VideoClip>& clips,
                            model::VisModel& frame_model, Aggregator& agg,
                            const AggregatorTrainOptions& opts) {
  if (clips.empty()) throw ValidationError("train_aggregator: empty dataset");
  opts.weights.validate();

  std::vector<nn::Parameter*> agg_params = agg.parameters();
  std::vector<nn::Parameter*> frame_params = frame_model.parameters();
  uint64_t frame_hash_before = frame_model.weights_hash();
  nn::Adam adam(agg_params, opts.lr);
  RngStream rng = RngStream(opts.seed).fork(0x7e4c);

  // Frozen per-frame outputs, cached per clip on first use.
  std::unordered_map<size_t, std::vector<model::FrameOutputs>> cache;
  auto frozen = [&](size_t clip_idx) -> const std::vector<model::FrameOutputs>& {
    auto it = cache.find(clip_idx);
    if (it != cache.end()) return it->second;
    const data::VideoClip& clip = clips[clip_idx];
    std::vector<model::FrameOutputs> outs;
    for (int f = 0; f < clip.num_frames(); ++f) {
      outs.push_back(frame_model.forward_detached(
          model::frame_to_tensor(clip.frames[static_cast<size_t>(f)])));
    }
    return cache.emplace(clip_idx, std::move(outs)).first->second;
  };

  TrainStats stats;
  stats.steps = opts.steps;
  std::vector<size_t> order(clips.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();

  for (int step = 0; step < opts.steps; ++step) {
    if (cursor >= order.size()) {
      rng.shuffle(order);
      cursor = 0;
    }
    size_t clip_idx = order[cursor++];
    const data::VideoClip& clip = clips[clip_idx];
    const auto& outs = frozen(clip_idx);

    int T = clip.num_frames();
    int S = std::min(opts.frames_per_sample, T);
    std::vector<int> all(static_cast<size_t>(T));
    for (int f = 0; f < T; ++f) all[static_cast<size_t>(f)] = f;
    rng.shuffle(all);
    std::vector<int> frames(all.begin(), all.begin() + S);
    std::sort(frames.begin(), frames.end());

    // Tracks visible in at least one sampled frame.
    std::vector<const data::InstanceTrack*> tracks;
    for (const data::InstanceTrack& tr : clip.instances) {
      bool vis = false;
      for (int f : frames) vis = vis || tr.visible[static_cast<size_t>(f)];
      if (vis) tracks.push_back(&tr);
    }

    Tape t;
    std::vector<Tensor> feats;
    for (int f : frames) feats.push_back(outs[static_cast<size_t>(f)].features);
    Var vq = agg.aggregate(t, t.leaf(stack_rows(feats)), S);
    Var logits = agg.video_class_logits(t, vq);

    std::vector<Var> frame_box_vars;
    std::vector<Var> frame_mask_vars;
    for (int si = 0; si < S; ++si) {
      const model::FrameOutputs& fo = outs[static_cast<size_t>(frames[static_cast<size_t>(si)])];
      Tensor fc({1, agg.model_config().hidden_dim});
      fc.vec() = fo.features.mat().colwise().mean();
      Var fm = agg.frame_mask_logits(t, vq, t.leaf(fo.mask_features));
      frame_mask_vars.push_back(fm);
      frame_box_vars.push_back(agg.frame_boxes(t, vq, fc, fm));
    }

    Var loss = t.leaf(Tensor::scalar(0.0));
    std::vector<int> sigma;
    if (!tracks.empty()) {
      int M = static_cast<int>(tracks.size());
      int N = agg.model_config().num_queries;
      Tensor S_cost({N, M});
      for (int n = 0; n < N; ++n) {
        Tensor row({1, static_cast<int>(logits.val().cols())});
        row.vec() = logits.val().mat().row(n);
        for (int m = 0; m < M; ++m) {
          const data::InstanceTrack& tr = *tracks[static_cast<size_t>(m)];
          double c = qfa::class_cost(row, tr.class_id);
          double box_acc = 0.0;
          int vis = 0;
          for (int si = 0; si < S; ++si) {
            int f = frames[static_cast<size_t>(si)];
            if (!tr.visible[static_cast<size_t>(f)]) continue;
            const Tensor& pb = frame_box_vars[static_cast<size_t>(si)].val();
            data::Box pbox{pb.at(n, 0), pb.at(n, 1), pb.at(n, 2), pb.at(n, 3)};
            box_acc += qfa::box_cost(pbox, tr.boxes[static_cast<size_t>(f)]);
            ++vis;
          }
          c += opts.lambda_b * box_acc / std::max(1, vis);
          S_cost.at(n, m) = c;
        }
      }
      sigma = qfa::match(S_cost, qfa::MatchMode::Hungarian).sigma;

      std::vector<int> classes;
      for (const auto* tr : tracks) classes.push_back(tr->class_id);
      Var cls = losses::classification_loss(t, logits, sigma, classes,
                                            opts.weights.no_object_weight);
      loss = cls;

      // Box and mask supervision per sampled frame, restricted to tracks
      // visible on that frame.
      std::vector<Var> frame_terms;
      for (int si = 0; si < S; ++si) {
        int f = frames[static_cast<size_t>(si)];
        std::vector<int> sub_sigma;
        std::vector<data::Box> sub_boxes;
        std::vector<Tensor> sub_masks;
        for (int m = 0; m < M; ++m) {
          const data::InstanceTrack& tr = *tracks[static_cast<size_t>(m)];
          if (!tr.visible[static_cast<size_t>(f)]) continue;
          sub_sigma.push_back(sigma[static_cast<size_t>(m)]);
          sub_boxes.push_back(tr.boxes[static_cast<size_t>(f)]);
          sub_masks.push_back(losses::downsample_mask(tr.masks[static_cast<size_t>(f)], 4));
        }
        if (sub_sigma.empty()) continue;
        Var bl = losses::box_loss(t, frame_box_vars[static_cast<size_t>(si)], sub_sigma, sub_boxes);
        Var ml = losses::mask_loss(t, frame_mask_vars[static_cast<size_t>(si)], sub_sigma, sub_masks);
        frame_terms.push_back(nn::add(nn::scale(bl, opts.weights.lambda1),
                                      nn::scale(ml, opts.weights.lambda2)));
      }
      if (!frame_terms.empty()) {
        Var acc = frame_terms[0];
        for (size_t i = 1; i < frame_terms.size(); ++i) acc = nn::add(acc, frame_terms[i]);
        loss = nn::add(loss, nn::scale(acc, 1.0 / static_cast<double>(frame_terms.size())));
      }
    }

    double lv = loss.val().item();
    if (!std::isfinite(lv)) {
      throw DivergenceError("train_aggregator: non-finite loss at step " +
                            std::to_string(step));
    }
    if (step == 0) stats.initial_loss = lv;
    stats.final_loss = lv;
    if (opts.on_step) opts.on_step(step, lv);

    adam.zero_grad();
    for (nn::Parameter* p : frame_params) p->zero_grad();
    t.backward(loss);
    for (nn::Parameter* p : frame_params) {
      if (p->grad.vec().norm() != 0.0) {
        throw std::runtime_error("train_aggregator: gradient leaked into frozen frame model");
      }
    }
    adam.set_lr(nn::cosine_lr(opts.lr, step, opts.steps));
    adam.step();
  }

  if (frame_model.weights_hash() != frame_hash_before) {
    throw std::runtime_error("train_aggregator: frozen frame model changed");
  }
  return stats;
}

}  // namespace ookd::teacher
