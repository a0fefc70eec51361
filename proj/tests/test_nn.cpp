#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "ookd/layers.hpp"
#include "ookd/tape.hpp"

using namespace ookd;
using namespace ookd::nn;
using ookd::testutil::grad_check;
using ookd::testutil::random_tensor;

TEST_SUITE_BEGIN("nn");

TEST_CASE("elementwise ops forward values") {
  Tape t;
  Var a = t.leaf(Tensor::from({2, 2}, {1.0, -2.0, 3.0, 0.5}));
  Var b = t.leaf(Tensor::from({2, 2}, {0.5, 1.0, -1.0, 2.0}));
  CHECK(add(a, b).val()[0] == doctest::Approx(1.5));
  CHECK(sub(a, b).val()[1] == doctest::Approx(-3.0));
  CHECK(mul(a, b).val()[2] == doctest::Approx(-3.0));
  CHECK(vdiv(a, b).val()[3] == doctest::Approx(0.25));
  CHECK(vabs(a).val()[1] == doctest::Approx(2.0));
  CHECK(vmax(a, b).val()[1] == doctest::Approx(1.0));
  CHECK(vmin(a, b).val()[0] == doctest::Approx(0.5));
  CHECK(relu(a).val()[1] == doctest::Approx(0.0));
  CHECK(vsum(a).val().item() == doctest::Approx(2.5));
  CHECK(vmean(a).val().item() == doctest::Approx(0.625));
}

TEST_CASE("matmul matches Eigen") {
  RngStream rng(1);
  Tensor A = random_tensor({3, 4}, rng);
  Tensor B = random_tensor({4, 2}, rng);
  Tape t;
  Var y = matmul(t.leaf(A), t.leaf(B));
  MatRM expect = A.mat() * B.mat();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 2; ++c) CHECK(y.val().at(r, c) == doctest::Approx(expect(r, c)));
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  RngStream rng(2);
  Tensor X = random_tensor({5, 7}, rng, 3.0);
  Tape t;
  Var y = softmax_rows(t.leaf(X));
  for (int r = 0; r < 5; ++r) {
    double s = 0.0;
    for (int c = 0; c < 7; ++c) s += y.val().at(r, c);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
  Tensor Xs = X.clone();
  Xs.vec().array() += 100.0;
  Var y2 = softmax_rows(t.leaf(Xs));
  for (int64_t i = 0; i < y.val().numel(); ++i) {
    CHECK(y.val()[i] == doctest::Approx(y2.val()[i]).epsilon(1e-9));
  }
}

TEST_CASE("unit_rows output is exactly unit norm, zero row maps to e0") {
  Tensor X = Tensor::from({2, 3}, {3.0, 4.0, 0.0, 0.0, 0.0, 0.0});
  Tape t;
  Var y = unit_rows(t.leaf(X));
  CHECK(y.val().at(0, 0) == doctest::Approx(0.6));
  CHECK(y.val().at(0, 1) == doctest::Approx(0.8));
  CHECK(y.val().mat().row(0).norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y.val().at(1, 0) == doctest::Approx(1.0));
  CHECK(y.val().mat().row(1).norm() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("gradient check: dense composite of elementwise ops") {
  RngStream rng(3);
  Parameter a("a", random_tensor({3, 3}, rng));
  Parameter b("b", random_tensor({3, 3}, rng, 0.7));
  auto eval = [&]() {
    Tape t;
    Var va = t.param(a), vb = t.param(b);
    Var y = mul(add(va, vb), sub(va, scale(vb, 0.5)));
    y = add(y, vabs(vmin(va, vb)));
    y = vdiv(y, add_scalar(vmax(mul(vb, vb), va), 2.0));
    Var loss = vmean(mul(y, y));
    a.zero_grad();
    b.zero_grad();
    t.backward(loss);
    return loss.val().item();
  };
  grad_check(eval, {&a, &b});
}

TEST_CASE("gradient check: linear + relu + sigmoid chain") {
  RngStream rng(4);
  Linear lin("lin", 4, 3, rng);
  Tensor X = random_tensor({2, 4}, rng);
  std::vector<Parameter*> ps;
  lin.collect(ps);
  auto eval = [&]() {
    Tape t;
    for (Parameter* p : ps) p->zero_grad();
    Var y = sigmoid(relu(lin(t, t.leaf(X))));
    Var loss = vmean(mul(y, y));
    t.backward(loss);
    return loss.val().item();
  };
  grad_check(eval, ps);
}

TEST_CASE("gradient check: softmax, layernorm, unit rows") {
  RngStream rng(5);
  Parameter x("x", random_tensor({3, 6}, rng));
  LayerNorm ln("ln", 6);
  std::vector<Parameter*> ps{&x};
  ln.collect(ps);
  Tensor target = random_tensor({3, 6}, rng);
  auto eval = [&]() {
    Tape t;
    for (Parameter* p : ps) p->zero_grad();
    Var h = ln(t, t.param(x));
    h = softmax_rows(h);
    h = unit_rows(h);
    Var d = sub(h, t.leaf(target));
    Var loss = vmean(mul(d, d));
    t.backward(loss);
    return loss.val().item();
  };
  grad_check(eval, ps, 1e-5, 1e-4);
}

TEST_CASE("gradient check: conv2d") {
  RngStream rng(6);
  Conv2d conv("conv", 2, 3, 3, 2, 1, rng);
  Tensor X = random_tensor({2, 6, 6}, rng);
  std::vector<Parameter*> ps;
  conv.collect(ps);
  Parameter px("x", X);
  ps.push_back(&px);
  auto eval = [&]() {
    Tape t;
    for (Parameter* p : ps) p->zero_grad();
    Var y = conv(t, t.param(px));
    Var loss = vmean(mul(y, y));
    t.backward(loss);
    return loss.val().item();
  };
  grad_check(eval, ps);
}

TEST_CASE("conv2d output size") {
  RngStream rng(7);
  Conv2d conv("c", 3, 8, 3, 2, 1, rng);
  Tape t;
  Var y = conv(t, t.leaf(random_tensor({3, 64, 64}, rng)));
  CHECK(y.val().shape() == std::vector<int>{8, 32, 32});
}

TEST_CASE("gradient check: multi-head attention") {
  RngStream rng(8);
  MultiHeadAttention mha("mha", 8, 2, rng);
  Tensor Q = random_tensor({3, 8}, rng);
  Tensor K = random_tensor({5, 8}, rng);
  std::vector<Parameter*> ps;
  mha.collect(ps);
  Parameter pq("q", Q), pk("k", K);
  ps.push_back(&pq);
  ps.push_back(&pk);
  auto eval = [&]() {
    Tape t;
    for (Parameter* p : ps) p->zero_grad();
    Var q = t.param(pq), k = t.param(pk);
    Var y = mha(t, q, k, k);
    Var loss = vmean(mul(y, y));
    t.backward(loss);
    return loss.val().item();
  };
  grad_check(eval, ps, 1e-5, 1e-4);
}

TEST_CASE("attention is permutation invariant over keys") {
  RngStream rng(9);
  MultiHeadAttention mha("mha", 8, 2, rng);
  Tensor Q = random_tensor({3, 8}, rng);
  Tensor K = random_tensor({6, 8}, rng);
  Tape t;
  Var y1 = mha(t, t.leaf(Q), t.leaf(K), t.leaf(K));
  Tensor Kp({6, 8});
  std::vector<int> perm{4, 2, 0, 5, 1, 3};
  for (int r = 0; r < 6; ++r) Kp.mat().row(r) = K.mat().row(perm[r]);
  Var y2 = mha(t, t.leaf(Q), t.leaf(Kp), t.leaf(Kp));
  for (int64_t i = 0; i < y1.val().numel(); ++i) {
    CHECK(y1.val()[i] == doctest::Approx(y2.val()[i]).epsilon(1e-10));
  }
}

TEST_CASE("gradient check: weighted cross entropy and bce") {
  RngStream rng(10);
  Parameter logits("logits", random_tensor({4, 5}, rng));
  std::vector<int> targets{0, 2, 4, 2};
  std::vector<double> weights{1.0, 0.1, 1.0, 0.5};
  auto eval = [&]() {
    Tape t;
    logits.zero_grad();
    Var loss = weighted_ce_rows(t.param(logits), targets, weights);
    t.backward(loss);
    return loss.val().item();
  };
  grad_check(eval, {&logits});

  Parameter z("z", random_tensor({3, 4}, rng));
  RngStream rng2(11);
  Tensor tgt({3, 4});
  for (int64_t i = 0; i < tgt.numel(); ++i) tgt[i] = rng2.uniform();
  auto eval2 = [&]() {
    Tape t;
    z.zero_grad();
    Var loss = bce_with_logits_mean(t.param(z), tgt);
    t.backward(loss);
    return loss.val().item();
  };
  grad_check(eval2, {&z});
}

TEST_CASE("gradient check: slicing, concat, gather") {
  RngStream rng(12);
  Parameter x("x", random_tensor({4, 6}, rng));
  auto eval = [&]() {
    Tape t;
    x.zero_grad();
    Var v = t.param(x);
    Var a = slice_cols(v, 0, 3);
    Var b = slice_cols(v, 3, 3);
    Var c = concat_cols({b, a});
    Var d = gather_rows(c, {1, 1, 3, 0});
    Var e = concat_rows({slice_rows(d, 0, 2), slice_rows(d, 2, 2)});
    Var f = add_row(e, t.leaf(Tensor::full({1, 6}, 0.25)));
    Var loss = vmean(mul(f, transpose(transpose(f))));
    t.backward(loss);
    return loss.val().item();
  };
  grad_check(eval, {&x});
}

TEST_CASE("adam minimizes a quadratic") {
  Parameter p("p", Tensor::from({2}, {5.0, -3.0}));
  Adam opt({&p}, 0.05);
  for (int i = 0; i < 400; ++i) {
    opt.zero_grad();
    Tape t;
    Var v = t.param(p);
    Var loss = vsum(mul(v, v));
    t.backward(loss);
    opt.step();
  }
  CHECK(std::fabs(p.value[0]) < 1e-2);
  CHECK(std::fabs(p.value[1]) < 1e-2);
}

TEST_CASE("cosine schedule endpoints") {
  CHECK(cosine_lr(1e-3, 0, 100) == doctest::Approx(1e-3));
  CHECK(cosine_lr(1e-3, 99, 100) == doctest::Approx(1e-5).epsilon(1e-6));
}

TEST_CASE("rng streams are deterministic and forkable") {
  RngStream a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  RngStream f1 = a.fork(7), f2 = b.fork(7);
  CHECK(f1.normal() == f2.normal());
  RngStream f3 = a.fork(8);
  CHECK(f1.uniform() != f3.uniform());
}

TEST_SUITE_END();
