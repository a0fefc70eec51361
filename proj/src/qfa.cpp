#include "ookd/qfa.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ookd::qfa {

double class_cost(const nn::Tensor& logits_row, int gt_class) {
  int64_t nc = logits_row.numel();
  if (gt_class < 0 || gt_class >= nc) {
    throw ValidationError("class_cost: class index " + std::to_string(gt_class) +
                          " out of range for " + std::to_string(nc) + " logits");
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < nc; ++i) mx = std::max(mx, logits_row[i]);
  double z = 0.0;
  for (int64_t i = 0; i < nc; ++i) z += std::exp(logits_row[i] - mx);
  return std::log(z) + mx - logits_row[gt_class];
}

namespace {

struct Corners {
  double x1, y1, x2, y2;
};

Corners to_corners(const data::Box& b, const char* which) {
  if (b[2] <= 0.0 || b[3] <= 0.0) {
    throw ValidationError(std::string("giou: ") + which + " box has non-positive size");
  }
  return {b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0};
}

}  // namespace

double giou(const data::Box& a, const data::Box& b) {
  Corners ca = to_corners(a, "first");
  Corners cb = to_corners(b, "second");
  double iw = std::max(0.0, std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1));
  double ih = std::max(0.0, std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1));
  double inter = iw * ih;
  double area_a = (ca.x2 - ca.x1) * (ca.y2 - ca.y1);
  double area_b = (cb.x2 - cb.x1) * (cb.y2 - cb.y1);
  double uni = area_a + area_b - inter;
  double hw = std::max(ca.x2, cb.x2) - std::min(ca.x1, cb.x1);
  double hh = std::max(ca.y2, cb.y2) - std::min(ca.y1, cb.y1);
  double hull = hw * hh;
  return inter / uni - (hull - uni) / hull;
}

CostMatrix cost_matrix(const nn::Tensor& class_logits, const nn::Tensor& pred_boxes,
                       const std::vector<int>& gt_classes,
                       const std::vector<data::Box>& gt_boxes, double lambda_b) {
  int N = static_cast<int>(class_logits.rows());
  int M = static_cast<int>(gt_classes.size());
  if (N < 1 || M < 1) throw ValidationError("cost_matrix: need N >= 1 and M >= 1");
  if (pred_boxes.dim(0) != N || pred_boxes.dim(1) != 4) {
    throw ValidationError("cost_matrix: pred_boxes must be N x 4");
  }
  if (static_cast<int>(gt_boxes.size()) != M) {
    throw ValidationError("cost_matrix: gt_classes/gt_boxes length mismatch");
  }
  CostMatrix cm;
  cm.lambda_b = lambda_b;
  cm.S = nn::Tensor({N, M});
  for (int n = 0; n < N; ++n) {
    nn::Tensor row({1, class_logits.dim(1)});
    row.vec() = class_logits.mat().row(n);
    data::Box pb{pred_boxes.at(n, 0), pred_boxes.at(n, 1), pred_boxes.at(n, 2),
                 pred_boxes.at(n, 3)};
    for (int m = 0; m < M; ++m) {
      double c = class_cost(row, gt_classes[static_cast<size_t>(m)]);
      if (lambda_b != 0.0) {
        c += lambda_b * box_cost(pb, gt_boxes[static_cast<size_t>(m)]);
      }
      cm.S.at(n, m) = c;
    }
  }
  if (!cm.S.all_finite()) throw ValidationError("cost_matrix: non-finite entries");
  return cm;
}

MatchMode parse_match_mode(const std::string& s) {
  if (s == "hungarian") return MatchMode::Hungarian;
  if (s == "argmin") return MatchMode::Argmin;
  throw ValidationError("qfa.mode: expected 'hungarian' or 'argmin', got '" + s + "'");
}

double Assignment::total_cost(const nn::Tensor& S) const {
  double c = 0.0;
  for (int m = 0; m < static_cast<int>(sigma.size()); ++m) {
    c += S.at(sigma[static_cast<size_t>(m)], m);
  }
  return c;
}

std::vector<int> hungarian_min_cost(const nn::Tensor& S) {
  int N = static_cast<int>(S.rows());  // predictions
  int M = static_cast<int>(S.cols());  // ground truths
  if (N < M) {
    throw ValidationError("hungarian: needs at least as many queries as ground truths");
  }
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // Rows of the internal problem are ground truths (1-indexed), columns are
  // predictions. Potentials-based shortest augmenting path.
  std::vector<double> u(static_cast<size_t>(M) + 1, 0.0);
  std::vector<double> v(static_cast<size_t>(N) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(N) + 1, 0);
  std::vector<int> way(static_cast<size_t>(N) + 1, 0);
  for (int i = 1; i <= M; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(N) + 1, kInf);
    std::vector<bool> used(static_cast<size_t>(N) + 1, false);
    do {
      used[static_cast<size_t>(j0)] = true;
      int i0 = p[static_cast<size_t>(j0)];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= N; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        double cur = S.at(j - 1, i0 - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= N; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> sigma(static_cast<size_t>(M), -1);
  for (int j = 1; j <= N; ++j) {
    if (p[static_cast<size_t>(j)] != 0) sigma[static_cast<size_t>(p[static_cast<size_t>(j)]) - 1] = j - 1;
  }
  return sigma;
}

Assignment match(const nn::Tensor& S, MatchMode mode) {
  int N = static_cast<int>(S.rows());
  int M = static_cast<int>(S.cols());
  Assignment a;
  a.method = mode;
  if (mode == MatchMode::Argmin) {
    a.sigma.resize(static_cast<size_t>(M));
    for (int m = 0; m < M; ++m) {
      int best = 0;
      for (int n = 1; n < N; ++n) {
        if (S.at(n, m) < S.at(best, m)) best = n;
      }
      a.sigma[static_cast<size_t>(m)] = best;
    }
  } else {
    a.sigma = hungarian_min_cost(S);
  }
  return a;
}

AssociatedPairs associate(const std::vector<int>& sigma_online,
                          const std::vector<int>& sigma_offline,
                          const nn::Tensor& online_embeddings,
                          const nn::Tensor& offline_embeddings) {
  if (sigma_online.size() != sigma_offline.size()) {
    throw ValidationError("associate: assignments have different lengths (" +
                          std::to_string(sigma_online.size()) + " vs " +
                          std::to_string(sigma_offline.size()) + ")");
  }
  int M = static_cast<int>(sigma_online.size());
  int C = M > 0 ? static_cast<int>(online_embeddings.cols()) : 0;
  AssociatedPairs out;
  out.student = nn::Tensor({M, C});
  out.teacher = nn::Tensor({M, C});
  for (int m = 0; m < M; ++m) {
    int qs = sigma_online[static_cast<size_t>(m)];
    int qt = sigma_offline[static_cast<size_t>(m)];
    out.indices.emplace_back(qs, qt);
    out.student.mat().row(m) = online_embeddings.mat().row(qs);
    out.teacher.mat().row(m) = offline_embeddings.mat().row(qt);
  }
  return out;
}

}  // namespace ookd::qfa
