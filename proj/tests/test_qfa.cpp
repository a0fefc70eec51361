#include <doctest.h>

#include <cmath>
#include <functional>
#include <set>

#include "grad_check.hpp"
#include "ookd/qfa.hpp"

using namespace ookd;
using namespace ookd::qfa;
using data::Box;
using nn::Tensor;

TEST_SUITE_BEGIN("qfa");

namespace {

// Exhaustive search over injective assignments of M ground truths to N queries.
double brute_force_cost(const Tensor& S) {
  int N = static_cast<int>(S.rows()), M = static_cast<int>(S.cols());
  std::vector<int> chosen;
  std::vector<bool> used(static_cast<size_t>(N), false);
  double best = std::numeric_limits<double>::infinity();
  std::function<void(int, double)> rec = [&](int m, double acc) {
    if (m == M) {
      best = std::min(best, acc);
      return;
    }
    for (int n = 0; n < N; ++n) {
      if (used[static_cast<size_t>(n)]) continue;
      used[static_cast<size_t>(n)] = true;
      rec(m + 1, acc + S.at(n, m));
      used[static_cast<size_t>(n)] = false;
    }
  };
  rec(0, 0.0);
  return best;
}

Box corners_to_cxcywh(double x1, double y1, double x2, double y2) {
  return {(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1};
}

}  // namespace

TEST_CASE("class cost limits and oracle") {
  Tensor hot = Tensor::from({4}, {80.0, 0.0, 0.0, 0.0});
  CHECK(class_cost(hot, 0) < 1e-9);
  Tensor uniform = Tensor::from({4}, {0.3, 0.3, 0.3, 0.3});
  CHECK(class_cost(uniform, 2) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  RngStream rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits({6});
    for (int i = 0; i < 6; ++i) logits[i] = rng.normal(0.0, 3.0);
    int cls = static_cast<int>(rng.randint(6));
    double lse = 0.0;
    for (int i = 0; i < 6; ++i) lse += std::exp(logits[i]);
    double expect = std::log(lse) - logits[cls];
    CHECK(std::fabs(class_cost(logits, cls) - expect) < 1e-9);
  }
  CHECK_THROWS_AS(class_cost(uniform, 4), ValidationError);
  CHECK_THROWS_AS(class_cost(uniform, -1), ValidationError);
}

TEST_CASE("giou analytic cases") {
  Box a{0.5, 0.5, 0.2, 0.2};
  CHECK(giou(a, a) == doctest::Approx(1.0));
  CHECK(box_cost(a, a) == doctest::Approx(0.0));

  // Unit squares sharing an edge: IoU = 0 and hull = union.
  Box left = corners_to_cxcywh(0.0, 0.0, 0.4, 0.4);
  Box right = corners_to_cxcywh(0.4, 0.0, 0.8, 0.4);
  CHECK(giou(left, right) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(box_cost(left, right) == doctest::Approx(1.0).epsilon(1e-12));

  // Hand geometry: [0,0,2,2] vs [1,1,3,3] scaled into the unit square.
  Box A = corners_to_cxcywh(0.0, 0.0, 0.5, 0.5);
  Box B = corners_to_cxcywh(0.25, 0.25, 0.75, 0.75);
  CHECK(std::fabs(giou(A, B) - (-5.0 / 63.0)) < 1e-9);
  CHECK(std::fabs(box_cost(A, B) - (1.0 + 5.0 / 63.0)) < 1e-9);

  CHECK_THROWS_AS(giou({0.5, 0.5, 0.0, 0.1}, a), ValidationError);
}

TEST_CASE("cost matrix composition") {
  int N = 8, M = 4, Nc = 5;
  RngStream rng(14);
  Tensor logits({N, Nc});
  Tensor boxes({N, 4});
  for (int64_t i = 0; i < logits.numel(); ++i) logits[i] = rng.normal(0.0, 2.0);
  for (int n = 0; n < N; ++n) {
    boxes.at(n, 0) = rng.uniform(0.2, 0.8);
    boxes.at(n, 1) = rng.uniform(0.2, 0.8);
    boxes.at(n, 2) = rng.uniform(0.05, 0.4);
    boxes.at(n, 3) = rng.uniform(0.05, 0.4);
  }
  std::vector<int> gt_classes;
  std::vector<Box> gt_boxes;
  for (int m = 0; m < M; ++m) {
    gt_classes.push_back(static_cast<int>(rng.randint(Nc)));
    gt_boxes.push_back({rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.3),
                        rng.uniform(0.1, 0.3)});
  }

  SUBCASE("lambda_b = 0 depends only on class logits") {
    gt_classes = {2, 2, 1, 2};
    CostMatrix cm = cost_matrix(logits, boxes, gt_classes, gt_boxes, 0.0);
    for (int n = 0; n < N; ++n) {
      CHECK(cm.S.at(n, 0) == doctest::Approx(cm.S.at(n, 1)));
      CHECK(cm.S.at(n, 0) == doctest::Approx(cm.S.at(n, 3)));
    }
  }

  SUBCASE("perfect prediction dominates") {
    Tensor l2({2, 3});
    l2.at(0, 1) = 50.0;  // confident correct class
    Tensor b2({2, 4});
    b2.at(0, 0) = 0.5; b2.at(0, 1) = 0.5; b2.at(0, 2) = 0.2; b2.at(0, 3) = 0.2;
    b2.at(1, 0) = 0.1; b2.at(1, 1) = 0.9; b2.at(1, 2) = 0.05; b2.at(1, 3) = 0.05;
    CostMatrix cm = cost_matrix(l2, b2, {1}, {{0.5, 0.5, 0.2, 0.2}}, 2.0);
    CHECK(cm.S.at(0, 0) < cm.S.at(1, 0));
  }

  SUBCASE("random case equals scalar composition at 1e-9") {
    double lb = 1.7;
    CostMatrix cm = cost_matrix(logits, boxes, gt_classes, gt_boxes, lb);
    for (int n = 0; n < N; ++n) {
      Tensor row({1, Nc});
      row.vec() = logits.mat().row(n);
      Box pb{boxes.at(n, 0), boxes.at(n, 1), boxes.at(n, 2), boxes.at(n, 3)};
      for (int m = 0; m < M; ++m) {
        double expect = class_cost(row, gt_classes[static_cast<size_t>(m)]) +
                        lb * box_cost(pb, gt_boxes[static_cast<size_t>(m)]);
        CHECK(std::fabs(cm.S.at(n, m) - expect) < 1e-9);
      }
    }
  }
}

TEST_CASE("match: analytic cases") {
  Tensor S({3, 3});
  S.fill(5.0);
  for (int i = 0; i < 3; ++i) S.at(i, i) = 0.1;
  Assignment am = match(S, MatchMode::Argmin);
  Assignment hm = match(S, MatchMode::Hungarian);
  CHECK(am.sigma == std::vector<int>{0, 1, 2});
  CHECK(hm.sigma == std::vector<int>{0, 1, 2});

  Tensor S2 = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
  CHECK(match(S2, MatchMode::Argmin).sigma == std::vector<int>{1, 0});
  Assignment h2 = match(S2, MatchMode::Hungarian);
  CHECK(h2.sigma == std::vector<int>{1, 0});
  CHECK(h2.total_cost(S2) == doctest::Approx(0.0));

  // Argmin may collide; hungarian must not.
  Tensor S3 = Tensor::from({2, 2}, {0.0, 0.0, 1.0, 1.0});
  CHECK(match(S3, MatchMode::Argmin).sigma == std::vector<int>{0, 0});
  Assignment h3 = match(S3, MatchMode::Hungarian);
  CHECK(h3.sigma[0] != h3.sigma[1]);

  Tensor wide({2, 3});
  CHECK_THROWS_AS(match(wide, MatchMode::Hungarian), ValidationError);
}

TEST_CASE("hungarian equals brute force on random matrices") {
  RngStream rng(15);
  for (int trial = 0; trial < 200; ++trial) {
    int M = 1 + static_cast<int>(rng.randint(5));
    Tensor S({8, M});
    for (int64_t i = 0; i < S.numel(); ++i) S[i] = rng.uniform(0.0, 10.0);
    Assignment h = match(S, MatchMode::Hungarian);
    std::vector<bool> seen(8, false);
    for (int q : h.sigma) {
      CHECK(q >= 0);
      CHECK(q < 8);
      CHECK_FALSE(seen[static_cast<size_t>(q)]);
      seen[static_cast<size_t>(q)] = true;
    }
    CHECK(h.total_cost(S) == doctest::Approx(brute_force_cost(S)).epsilon(1e-12));
  }
}

TEST_CASE("constant shift leaves assignments unchanged") {
  RngStream rng(16);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor S({6, 4});
    for (int64_t i = 0; i < S.numel(); ++i) S[i] = rng.uniform(0.0, 5.0);
    Tensor Sshift = S.clone();
    Sshift.vec().array() += 3.25;
    CHECK(match(S, MatchMode::Argmin).sigma == match(Sshift, MatchMode::Argmin).sigma);
    CHECK(match(S, MatchMode::Hungarian).sigma == match(Sshift, MatchMode::Hungarian).sigma);
  }
}

TEST_CASE("associate pairs through shared ground-truth indices") {
  Tensor on({4, 3});
  Tensor off({4, 3});
  for (int64_t i = 0; i < on.numel(); ++i) {
    on[i] = static_cast<double>(i);
    off[i] = 100.0 + static_cast<double>(i);
  }

  SUBCASE("M = 0 gives an empty pair list") {
    AssociatedPairs p = associate({}, {}, on, off);
    CHECK(p.indices.empty());
    CHECK(p.student.numel() == 0);
  }

  SUBCASE("index bookkeeping") {
    AssociatedPairs p = associate({3, 1}, {0, 2}, on, off);
    REQUIRE(p.indices.size() == 2);
    CHECK(p.indices[0] == std::pair<int, int>{3, 0});
    CHECK(p.indices[1] == std::pair<int, int>{1, 2});
    CHECK(p.student.at(0, 0) == on.at(3, 0));
    CHECK(p.teacher.at(0, 0) == off.at(0, 0));
    CHECK(p.student.at(1, 2) == on.at(1, 2));
    CHECK(p.teacher.at(1, 1) == off.at(2, 1));
  }

  SUBCASE("ground-truth permutation permutes pairs identically") {
    std::vector<int> so{3, 1, 0}, sf{0, 2, 1};
    AssociatedPairs p1 = associate(so, sf, on, off);
    std::vector<int> perm{2, 0, 1};
    std::vector<int> so2, sf2;
    for (int i : perm) {
      so2.push_back(so[static_cast<size_t>(i)]);
      sf2.push_back(sf[static_cast<size_t>(i)]);
    }
    AssociatedPairs p2 = associate(so2, sf2, on, off);
    std::multiset<std::pair<int, int>> s1(p1.indices.begin(), p1.indices.end());
    std::multiset<std::pair<int, int>> s2(p2.indices.begin(), p2.indices.end());
    CHECK(s1 == s2);
  }

  CHECK_THROWS_AS(associate({1}, {0, 2}, on, off), ValidationError);
}

TEST_SUITE_END();
