#include "ookd/model.hpp"

#include <cmath>

namespace ookd::model {

using nn::Tape;
using nn::Tensor;
using nn::Var;

void ModelConfig::validate() const {
  if (num_queries < 1) throw ValidationError("ModelConfig.num_queries: must be >= 1");
  if (hidden_dim % attention_heads != 0) {
    throw ValidationError("ModelConfig.hidden_dim: must be divisible by attention_heads");
  }
  if (num_classes < 1) throw ValidationError("ModelConfig.num_classes: must be >= 1");
  if (backbone_widths.size() != 3) {
    throw ValidationError("ModelConfig.backbone_widths: expected 3 stage widths");
  }
  if (input_height % 8 != 0 || input_width % 8 != 0) {
    throw ValidationError("ModelConfig.input size: must be divisible by 8");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"num_queries", num_queries},
          {"hidden_dim", hidden_dim},
          {"num_classes", num_classes},
          {"decoder_layers", decoder_layers},
          {"attention_heads", attention_heads},
          {"backbone_widths", backbone_widths},
          {"mask_dim", mask_dim},
          {"mask_head_hidden", mask_head_hidden},
          {"input_height", input_height},
          {"input_width", input_width}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_queries = j.at("num_queries").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.attention_heads = j.at("attention_heads").get<int>();
  c.backbone_widths = j.at("backbone_widths").get<std::vector<int>>();
  c.mask_dim = j.at("mask_dim").get<int>();
  c.mask_head_hidden = j.at("mask_head_hidden").get<int>();
  c.input_height = j.at("input_height").get<int>();
  c.input_width = j.at("input_width").get<int>();
  return c;
}

bool ModelConfig::operator==(const ModelConfig& o) const {
  return to_json() == o.to_json();
}

Tensor frame_to_tensor(const Image& frame) {
  Tensor t({3, frame.height, frame.width});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < frame.height; ++y) {
      for (int x = 0; x < frame.width; ++x) {
        t[static_cast<int64_t>(c) * frame.height * frame.width +
          static_cast<int64_t>(y) * frame.width + x] =
            (frame.at(y, x, c) / 255.0 - 0.45) / 0.25;
      }
    }
  }
  return t;
}

Tensor sine_position_encoding(int h, int w, int dim) {
  Tensor pe({h * w, dim});
  int half = dim / 2;
  int quarter = half / 2;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int row = y * w + x;
      for (int i = 0; i < quarter; ++i) {
        double freq = std::pow(10000.0, -2.0 * i / half);
        pe.at(row, 2 * i) = std::sin(y * freq);
        pe.at(row, 2 * i + 1) = std::cos(y * freq);
        pe.at(row, half + 2 * i) = std::sin(x * freq);
        pe.at(row, half + 2 * i + 1) = std::cos(x * freq);
      }
    }
  }
  return pe;
}

int dynamic_mask_param_count(int in_dim, int hidden) {
  return in_dim * hidden + hidden + hidden + 1;
}

Var mask_box_stats(Tape& t, Var mask_logits, int h, int w) {
  int P = h * w;
  Tensor xs({P, 1}), ys({P, 1}), xs2({P, 1}), ys2({P, 1}), ones({P, 1});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double px = (x + 0.5) / w, py = (y + 0.5) / h;
      xs.at(y * w + x, 0) = px;
      ys.at(y * w + x, 0) = py;
      xs2.at(y * w + x, 0) = px * px;
      ys2.at(y * w + x, 0) = py * py;
      ones.at(y * w + x, 0) = 1.0;
    }
  }
  Var p = nn::sigmoid(mask_logits);
  Var area = nn::add_scalar(nn::matmul(p, t.leaf(ones)), 1e-6);
  Var mx = nn::vdiv(nn::matmul(p, t.leaf(xs)), area);
  Var my = nn::vdiv(nn::matmul(p, t.leaf(ys)), area);
  Var ex2 = nn::vdiv(nn::matmul(p, t.leaf(xs2)), area);
  Var ey2 = nn::vdiv(nn::matmul(p, t.leaf(ys2)), area);
  Var vx = nn::add_scalar(nn::sub(ex2, nn::mul(mx, mx)), 1e-6);
  Var vy = nn::add_scalar(nn::sub(ey2, nn::mul(my, my)), 1e-6);
  // For a filled axis-aligned box, width = sqrt(12 * variance).
  Var sx = nn::scale(nn::vsqrt(vx), std::sqrt(12.0));
  Var sy = nn::scale(nn::vsqrt(vy), std::sqrt(12.0));
  return nn::concat_cols({mx, my, sx, sy});
}

Var logit_clamped(Tape& t, Var p, double lo, double hi) {
  Tensor lo_t = Tensor::full(p.val().shape(), lo);
  Tensor hi_t = Tensor::full(p.val().shape(), hi);
  Var c = nn::vmin(nn::vmax(p, t.leaf(lo_t)), t.leaf(hi_t));
  Var one_minus = nn::add_scalar(nn::scale(c, -1.0), 1.0);
  return nn::vlog(nn::vdiv(c, one_minus));
}

VisModel::VisModel(const ModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  RngStream rng(init_seed);
  const auto& bw = cfg_.backbone_widths;
  const int C = cfg_.hidden_dim;
  stem_ = nn::Conv2d("backbone.stem", 3, bw[0], 3, 2, 1, rng);
  conv2a_ = nn::Conv2d("backbone.s2a", bw[0], bw[1], 3, 2, 1, rng);
  conv2b_ = nn::Conv2d("backbone.s2b", bw[1], bw[1], 3, 1, 1, rng);
  conv3a_ = nn::Conv2d("backbone.s3a", bw[1], bw[2], 3, 2, 1, rng);
  conv3b_ = nn::Conv2d("backbone.s3b", bw[2], bw[2], 3, 1, 1, rng);
  token_proj_ = nn::Linear("backbone.token_proj", bw[2], C, rng);
  mask_proj_ = nn::Conv2d("backbone.mask_proj", bw[1], cfg_.mask_dim, 3, 1, 1, rng);
  query_embed_ = nn::Parameter("decoder.query_embed", Tensor({cfg_.num_queries, C}));
  for (int64_t i = 0; i < query_embed_.value.numel(); ++i) {
    query_embed_.value[i] = rng.normal(0.0, 0.5);
  }
  int h8 = cfg_.input_height / 8, w8 = cfg_.input_width / 8;
  layers_.resize(static_cast<size_t>(cfg_.decoder_layers));
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    std::string p = "decoder.layer" + std::to_string(l);
    DecoderLayer& dl = layers_[static_cast<size_t>(l)];
    dl.self_attn = nn::MultiHeadAttention(p + ".self", C, cfg_.attention_heads, rng);
    dl.cross_attn = nn::MultiHeadAttention(p + ".cross", C, cfg_.attention_heads, rng);
    dl.norm_self = nn::LayerNorm(p + ".norm_self", C);
    dl.norm_cross = nn::LayerNorm(p + ".norm_cross", C);
    dl.norm_ffn = nn::LayerNorm(p + ".norm_ffn", C);
    dl.ffn1 = nn::Linear(p + ".ffn1", C, 2 * C, rng);
    dl.ffn2 = nn::Linear(p + ".ffn2", 2 * C, C, rng);
    // Gaussian locality prior around each query's anchor; learnable.
    dl.cross_bias = nn::Parameter(p + ".cross_bias", Tensor({cfg_.num_queries, h8 * w8}));
    int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg_.num_queries))));
    const double sigma2 = 0.25 * 0.25;
    for (int q = 0; q < cfg_.num_queries; ++q) {
      double ax = (q % grid + 0.5) / grid;
      double ay = (q / grid + 0.5) / grid;
      for (int y = 0; y < h8; ++y) {
        for (int x = 0; x < w8; ++x) {
          double px = (x + 0.5) / w8, py = (y + 0.5) / h8;
          double d2 = (px - ax) * (px - ax) + (py - ay) * (py - ay);
          dl.cross_bias.value.at(q, y * w8 + x) = -d2 / (2.0 * sigma2);
        }
      }
    }
  }
  final_norm_ = nn::LayerNorm("decoder.final_norm", C);
  class_head_ = nn::Linear("heads.class", C, cfg_.logits_dim(), rng);
  // The box head sees the query feature plus its mask's soft moments.
  box_head_ = nn::Mlp("heads.box", C + 4, C, 4, rng);
  int dyn = dynamic_mask_param_count(cfg_.mask_dim + 2, cfg_.mask_head_hidden);
  mask_controller_ = nn::Linear("heads.mask_controller", C, dyn, rng);
  embed_head_ = nn::Mlp("heads.embed", C, C, C, rng);
  pos_encoding_ = sine_position_encoding(cfg_.input_height / 8, cfg_.input_width / 8, C);
}

Var VisModel::backbone_tokens(Tape& t, const Tensor& frame, Var* mask_feat) const {
  if (frame.ndim() != 3 || frame.dim(0) != 3 || frame.dim(1) != cfg_.input_height ||
      frame.dim(2) != cfg_.input_width) {
    throw ValidationError("VisModel: frame shape " + frame.shape_str() +
                          " does not match config input size");
  }
  Var x = t.leaf(frame);
  Var s1 = nn::relu(stem_(t, x));
  Var s2 = nn::relu(conv2b_(t, nn::relu(conv2a_(t, s1))));
  Var s3 = nn::relu(conv3b_(t, nn::relu(conv3a_(t, s2))));

  if (mask_feat) {
    // Stride-4 mask features with two appended coordinate channels.
    Var mf = nn::relu(mask_proj_(t, s2));
    int mh = cfg_.input_height / 4, mw = cfg_.input_width / 4;
    int P = mh * mw;
    Var flat = nn::transpose(nn::reshape(mf, {cfg_.mask_dim, P}));
    Tensor coords({P, 2});
    for (int y = 0; y < mh; ++y) {
      for (int x2 = 0; x2 < mw; ++x2) {
        coords.at(y * mw + x2, 0) = 2.0 * x2 / (mw - 1) - 1.0;
        coords.at(y * mw + x2, 1) = 2.0 * y / (mh - 1) - 1.0;
      }
    }
    *mask_feat = nn::concat_cols({flat, t.leaf(coords)});
  }

  int h8 = cfg_.input_height / 8, w8 = cfg_.input_width / 8;
  Var tokens = token_proj_(t, nn::transpose(nn::reshape(s3, {cfg_.backbone_widths[2], h8 * w8})));
  return tokens;
}

Var VisModel::decode(Tape& t, Var tokens) const {
  auto& self = const_cast<VisModel&>(*this);
  Var keys = nn::add(tokens, t.leaf(pos_encoding_));
  Var qe = t.param(self.query_embed_);
  Var x = qe;
  // Query embeddings re-enter each attention as positional conditioning.
  for (const DecoderLayer& dl : layers_) {
    auto& mdl = const_cast<DecoderLayer&>(dl);
    Var h = dl.norm_self(t, x);
    Var hq = nn::add(h, qe);
    x = nn::add(x, dl.self_attn(t, hq, hq, h));
    // Values carry the positional encoding too, so attended features tell
    // the box head where they came from.
    x = nn::add(x, dl.cross_attn(t, nn::add(dl.norm_cross(t, x), qe), keys, keys,
                                 t.param(mdl.cross_bias)));
    x = nn::add(x, dl.ffn2(t, nn::relu(dl.ffn1(t, dl.norm_ffn(t, x)))));
  }
  return final_norm_(t, x);
}

Var VisModel::contrastive_embed(Tape& t, Var features) const {
  return nn::unit_rows(embed_head_(t, features));
}

Var VisModel::mask_head(Tape& t, Var queries, Var mask_features) const {
  auto& self = const_cast<VisModel&>(*this);
  int in_dim = cfg_.mask_dim + 2;
  int hidden = cfg_.mask_head_hidden;
  Var controller = mask_controller_(t, queries);
  int N = static_cast<int>(queries.val().rows());
  std::vector<Var> rows;
  rows.reserve(static_cast<size_t>(N));
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
    Var logits = nn::add_row(nn::matmul(h, w2), b2);
    rows.push_back(nn::transpose(logits));
  }
  (void)self;
  return nn::concat_rows(rows);
}

FrameQuerySet VisModel::forward(Tape& t, const Tensor& frame) const {
  auto& self = const_cast<VisModel&>(*this);
  FrameQuerySet out;
  Var mask_feat;
  Var tokens = backbone_tokens(t, frame, &mask_feat);
  Var feats = decode(t, tokens);
  out.features = feats;
  out.class_logits = class_head_(t, feats);
  out.mask_features = mask_feat;
  out.mask_logits = mask_head(t, feats, mask_feat);
  out.mask_h = cfg_.input_height / 4;
  out.mask_w = cfg_.input_width / 4;
  // The soft-mask moments are the base box prediction; the head learns a
  // residual in logit space.
  Var stats = mask_box_stats(t, out.mask_logits, out.mask_h, out.mask_w);
  Var box_in = nn::concat_cols({feats, stats});
  out.boxes = nn::sigmoid(nn::add(box_head_(t, box_in), logit_clamped(t, stats)));
  (void)self;
  out.embeddings = contrastive_embed(t, feats);
  return out;
}

FrameOutputs VisModel::forward_detached(const Tensor& frame) const {
  Tape t;
  FrameQuerySet q = forward(t, frame);
  FrameOutputs o;
  o.features = q.features.val().clone();
  o.class_logits = q.class_logits.val().clone();
  o.boxes = q.boxes.val().clone();
  o.mask_logits = q.mask_logits.val().clone();
  o.embeddings = q.embeddings.val().clone();
  o.mask_features = q.mask_features.val().clone();
  o.mask_h = q.mask_h;
  o.mask_w = q.mask_w;
  return o;
}

std::vector<nn::Parameter*> VisModel::parameters() {
  std::vector<nn::Parameter*> ps;
  stem_.collect(ps);
  conv2a_.collect(ps);
  conv2b_.collect(ps);
  conv3a_.collect(ps);
  conv3b_.collect(ps);
  token_proj_.collect(ps);
  mask_proj_.collect(ps);
  ps.push_back(&query_embed_);
  for (DecoderLayer& dl : layers_) {
    dl.self_attn.collect(ps);
    dl.cross_attn.collect(ps);
    dl.norm_self.collect(ps);
    dl.norm_cross.collect(ps);
    dl.norm_ffn.collect(ps);
    dl.ffn1.collect(ps);
    dl.ffn2.collect(ps);
    ps.push_back(&dl.cross_bias);
  }
  final_norm_.collect(ps);
  class_head_.collect(ps);
  box_head_.collect(ps);
  mask_controller_.collect(ps);
  embed_head_.collect(ps);
  return ps;
}

std::vector<const nn::Parameter*> VisModel::parameters() const {
  auto ps = const_cast<VisModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

uint64_t VisModel::weights_hash() const {
  auto ps = const_cast<VisModel*>(this)->parameters();
  return nn::param_hash(ps);
}

}  // namespace ookd::model
