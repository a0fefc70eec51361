#pragma once

#include <string>
#include <vector>

#include "ookd/common.hpp"
#include "ookd/tape.hpp"

namespace ookd::nn {

// y = x * w + b, x: [R, in] -> [R, out]
struct Linear {
  Parameter w, b;

  Linear() = default;
  Linear(const std::string& name, int in, int out, RngStream& rng);

  Var operator()(Tape& t, Var x) const;
  void collect(std::vector<Parameter*>& ps);
};

// Square-kernel conv over [Cin,H,W].
struct Conv2d {
  Parameter w, b;
  int k = 3, stride = 1, pad = 1, cin = 0, cout = 0;

  Conv2d() = default;
  Conv2d(const std::string& name, int cin, int cout, int k, int stride, int pad,
         RngStream& rng);

  Var operator()(Tape& t, Var x) const;
  void collect(std::vector<Parameter*>& ps);
};

struct LayerNorm {
  Parameter gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(const std::string& name, int dim);

  Var operator()(Tape& t, Var x) const;
  void collect(std::vector<Parameter*>& ps);
};

struct Mlp {
  Linear l1, l2;

  Mlp() = default;
  Mlp(const std::string& name, int in, int hidden, int out, RngStream& rng);

  Var operator()(Tape& t, Var x) const;
  void collect(std::vector<Parameter*>& ps);
};

struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int heads = 1, dim = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int dim, int heads, RngStream& rng);

  // q: [Nq,C], k/v: [Nk,C] -> [Nq,C]; an optional [Nq,Nk] bias is added to
  // every head's attention logits.
  Var operator()(Tape& t, Var q, Var k, Var v, Var bias = Var{}) const;
  void collect(std::vector<Parameter*>& ps);
};

// Pre-norm transformer block pieces used by the decoder and the aggregator.
struct SelfAttentionBlock {
  MultiHeadAttention attn;
  LayerNorm norm_attn, norm_ffn;
  Linear ffn1, ffn2;

  SelfAttentionBlock() = default;
  SelfAttentionBlock(const std::string& name, int dim, int heads, int ffn_dim,
                     RngStream& rng);

  Var operator()(Tape& t, Var x) const;
  void collect(std::vector<Parameter*>& ps);
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void zero_grad();
  void step();

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// Cosine decay from lr0 to floor_frac*lr0 over total steps.
inline double cosine_lr(double lr0, int64_t step, int64_t total, double floor_frac = 0.01) {
  if (total <= 1) return lr0;
  double lr_min = floor_frac * lr0;
  double x = static_cast<double>(step) / static_cast<double>(total - 1);
  if (x > 1.0) x = 1.0;
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(M_PI * x));
}

int64_t total_param_count(const std::vector<Parameter*>& ps);
uint64_t param_hash(const std::vector<Parameter*>& ps);

}  // namespace ookd::nn
