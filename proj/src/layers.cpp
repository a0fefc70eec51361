#include "ookd/layers.hpp"

namespace ookd::nn {

namespace {

Tensor uniform_init(std::vector<int> shape, double bound, RngStream& rng) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

Linear::Linear(const std::string& name, int in, int out, RngStream& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  w = Parameter(name + ".w", uniform_init({in, out}, bound, rng));
  b = Parameter(name + ".b", Tensor::zeros({1, out}));
}

Var Linear::operator()(Tape& t, Var x) const {
  auto& self = const_cast<Linear&>(*this);
  return add_row(matmul(x, t.param(self.w)), t.param(self.b));
}

void Linear::collect(std::vector<Parameter*>& ps) {
  ps.push_back(&w);
  ps.push_back(&b);
}

Conv2d::Conv2d(const std::string& name, int cin_, int cout_, int k_, int stride_,
               int pad_, RngStream& rng)
    : k(k_), stride(stride_), pad(pad_), cin(cin_), cout(cout_) {
  double bound = 1.0 / std::sqrt(static_cast<double>(cin_ * k_ * k_));
  w = Parameter(name + ".w", uniform_init({cout_, cin_ * k_ * k_}, bound, rng));
  b = Parameter(name + ".b", Tensor::zeros({cout_}));
}

Var Conv2d::operator()(Tape& t, Var x) const {
  auto& self = const_cast<Conv2d&>(*this);
  return conv2d(x, t.param(self.w), t.param(self.b), k, stride, pad);
}

void Conv2d::collect(std::vector<Parameter*>& ps) {
  ps.push_back(&w);
  ps.push_back(&b);
}

LayerNorm::LayerNorm(const std::string& name, int dim) {
  gamma = Parameter(name + ".gamma", Tensor::full({1, dim}, 1.0));
  beta = Parameter(name + ".beta", Tensor::zeros({1, dim}));
}

Var LayerNorm::operator()(Tape& t, Var x) const {
  auto& self = const_cast<LayerNorm&>(*this);
  return layer_norm_rows(x, t.param(self.gamma), t.param(self.beta));
}

void LayerNorm::collect(std::vector<Parameter*>& ps) {
  ps.push_back(&gamma);
  ps.push_back(&beta);
}

Mlp::Mlp(const std::string& name, int in, int hidden, int out, RngStream& rng)
    : l1(name + ".l1", in, hidden, rng), l2(name + ".l2", hidden, out, rng) {}

Var Mlp::operator()(Tape& t, Var x) const { return l2(t, relu(l1(t, x))); }

void Mlp::collect(std::vector<Parameter*>& ps) {
  l1.collect(ps);
  l2.collect(ps);
}

MultiHeadAttention::MultiHeadAttention(const std::string& name, int dim_, int heads_,
                                       RngStream& rng)
    : wq(name + ".wq", dim_, dim_, rng),
      wk(name + ".wk", dim_, dim_, rng),
      wv(name + ".wv", dim_, dim_, rng),
      wo(name + ".wo", dim_, dim_, rng),
      heads(heads_),
      dim(dim_) {
  if (dim_ % heads_ != 0) {
    throw ValidationError("MultiHeadAttention: dim must be divisible by head count");
  }
}

Var MultiHeadAttention::operator()(Tape& t, Var q, Var k, Var v, Var bias) const {
  Var Q = wq(t, q), K = wk(t, k), V = wv(t, v);
  int dh = dim / heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var Qh = slice_cols(Q, h * dh, dh);
    Var Kh = slice_cols(K, h * dh, dh);
    Var Vh = slice_cols(V, h * dh, dh);
    Var scores = scale(matmul(Qh, transpose(Kh)), inv_sqrt);
    if (bias.defined()) scores = add(scores, bias);
    Var attn = softmax_rows(scores);
    outs.push_back(matmul(attn, Vh));
  }
  return wo(t, concat_cols(outs));
}

void MultiHeadAttention::collect(std::vector<Parameter*>& ps) {
  wq.collect(ps);
  wk.collect(ps);
  wv.collect(ps);
  wo.collect(ps);
}

SelfAttentionBlock::SelfAttentionBlock(const std::string& name, int dim, int heads,
                                       int ffn_dim, RngStream& rng)
    : attn(name + ".attn", dim, heads, rng),
      norm_attn(name + ".norm_attn", dim),
      norm_ffn(name + ".norm_ffn", dim),
      ffn1(name + ".ffn1", dim, ffn_dim, rng),
      ffn2(name + ".ffn2", ffn_dim, dim, rng) {}

Var SelfAttentionBlock::operator()(Tape& t, Var x) const {
  Var h = norm_attn(t, x);
  x = add(x, attn(t, h, h, h));
  x = add(x, ffn2(t, relu(ffn1(t, norm_ffn(t, x)))));
  return x;
}

void SelfAttentionBlock::collect(std::vector<Parameter*>& ps) {
  attn.collect(ps);
  norm_attn.collect(ps);
  norm_ffn.collect(ps);
  ffn1.collect(ps);
  ffn2.collect(ps);
}

Adam::Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (Parameter* p : params_) {
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void Adam::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter* p = params_[i];
    double* mv = m_[i].data();
    double* vv = v_[i].data();
    double* g = p->grad.data();
    double* x = p->value.data();
    int64_t n = p->value.numel();
    for (int64_t j = 0; j < n; ++j) {
      mv[j] = beta1_ * mv[j] + (1.0 - beta1_) * g[j];
      vv[j] = beta2_ * vv[j] + (1.0 - beta2_) * g[j] * g[j];
      double mhat = mv[j] / bc1;
      double vhat = vv[j] / bc2;
      x[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

int64_t total_param_count(const std::vector<Parameter*>& ps) {
  int64_t n = 0;
  for (const Parameter* p : ps) n += p->value.numel();
  return n;
}

uint64_t param_hash(const std::vector<Parameter*>& ps) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const Parameter* p : ps) {
    h = fnv1a64(p->name.data(), p->name.size(), h);
    h = fnv1a64(p->value.data(), static_cast<size_t>(p->value.numel()) * sizeof(double), h);
  }
  return h;
}

}  // namespace ookd::nn
