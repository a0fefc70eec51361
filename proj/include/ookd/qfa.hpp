#pragma once

#include <utility>
#include <vector>

#include "ookd/dataset.hpp"
#include "ookd/tensor.hpp"

namespace ookd::qfa {

// Cross entropy of the ground-truth class under softmax(logits).
double class_cost(const nn::Tensor& logits_row, int gt_class);

// Generalized IoU of two normalized (cx, cy, w, h) boxes; in (-1, 1].
// Throws on non-positive width/height.
double giou(const data::Box& a, const data::Box& b);

inline double box_cost(const data::Box& a, const data::Box& b) { return 1.0 - giou(a, b); }

struct CostMatrix {
  nn::Tensor S;  // N x M
  double lambda_b = 2.0;
};

// S[n,m] = class_cost(logits_n, class_m) + lambda_b * (1 - giou(box_n, box_m))
CostMatrix cost_matrix(const nn::Tensor& class_logits, const nn::Tensor& pred_boxes,
                       const std::vector<int>& gt_classes,
                       const std::vector<data::Box>& gt_boxes, double lambda_b);

enum class MatchMode { Hungarian, Argmin };

MatchMode parse_match_mode(const std::string& s);

struct Assignment {
  std::vector<int> sigma;  // sigma[m] = query index matched to ground truth m
  MatchMode method = MatchMode::Hungarian;

  double total_cost(const nn::Tensor& S) const;
};

// Argmin mode: independent per-column minimizers (ties -> lowest index).
// Hungarian mode: injective sigma minimizing the total cost; requires N >= M.
Assignment match(const nn::Tensor& S, MatchMode mode);

// Minimum-cost injective assignment of columns to rows (rows >= cols),
// exact O(N^2 M) shortest augmenting path implementation.
std::vector<int> hungarian_min_cost(const nn::Tensor& S);

struct AssociatedPairs {
  // (student query, teacher query) joined through the shared ground-truth index.
  std::vector<std::pair<int, int>> indices;
  nn::Tensor student;  // M x C gathered student embeddings
  nn::Tensor teacher;  // M x C gathered teacher embeddings
};

AssociatedPairs associate(const std::vector<int>& sigma_online,
                          const std::vector<int>& sigma_offline,
                          const nn::Tensor& online_embeddings,
                          const nn::Tensor& offline_embeddings);

}  // namespace ookd::qfa
