#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpe/errors.hpp"

namespace cpe {

// Base-learner library for the stacked nuisance fits. When ensemble is false
// only main-effects logistic regression is used (the parametric comparator).
struct LearnerSpec {
  std::vector<std::string> library{"logit", "gbt", "knn"};
  int cv_folds = 5;
  bool ensemble = true;

  static LearnerSpec logit_only() { return {{"logit"}, 5, false}; }
};

// Pooled unit-level training data, one row per unit.
struct TrainMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> x;        // rows * cols, row-major
  std::vector<double> y;        // binary responses
  std::vector<int> cluster_of;  // per-row cluster index (CV folds respect clusters)

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(x.data() + i * cols, cols);
  }
  void push_row(std::span<const double> feat, double response, int cluster);
};

// ---------------------------------------------------------------------------
// Main-effects logistic regression via IRLS. Constant columns are dropped
// from the design; separation (diverging coefficients) falls back to a
// ridge-penalized fit and records it.

struct LogisticModel {
  std::vector<double> beta;        // intercept first, then kept features
  std::vector<double> std_errors;  // same layout
  std::vector<int> kept;           // original feature indices in the design
  std::size_t cols = 0;
  bool ridged = false;

  double linear(std::span<const double> feat) const;
  double predict(std::span<const double> feat) const;
};

LogisticModel fit_logistic(const TrainMatrix& train, double ridge = 0.0);

// Negative mean log-likelihood and its gradient at beta (intercept first,
// one slot per original feature). Test hook for the IRLS gradient checks.
double logistic_nll(const TrainMatrix& train, std::span<const double> beta,
                    std::span<double> grad_out);

// ---------------------------------------------------------------------------
// Gradient-boosted shallow trees with logistic loss and Newton leaf values.

struct GbtParams {
  int n_trees = 200;
  int depth = 2;
  double learning_rate = 0.1;
  double subsample = 0.8;
  double l2 = 1.0;      // leaf-value shrinkage
  int min_leaf = 5;
  double min_gain = 1e-12;
};

struct GbtNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  double leaf = 0.0;  // learning-rate scaled
  int left = -1;
  int right = -1;
};

struct GbtModel {
  double base = 0.0;
  std::vector<std::vector<GbtNode>> trees;
  std::size_t cols = 0;

  double raw_score(std::span<const double> feat) const;
  double predict(std::span<const double> feat) const;
};

GbtModel fit_gbt(const TrainMatrix& train, const GbtParams& params, std::uint64_t seed);

// ---------------------------------------------------------------------------
// k-nearest-neighbor class-probability smoother on standardized features.
// Default k = ceil(sqrt(rows)).

struct KnnModel {
  int k = 1;
  std::size_t cols = 0;
  std::vector<double> mean;
  std::vector<double> inv_sd;  // 0 for constant dims (excluded from distance)
  std::vector<double> xz;      // standardized train matrix
  std::vector<double> y;

  double predict(std::span<const double> feat) const;

  // Split queries for batches that share trailing feature dims: precompute the
  // per-train-point squared distance over dims >= from_dim once, then complete
  // each variant with its leading dims.
  std::vector<double> partial_sq_dist(std::span<const double> feat, std::size_t from_dim) const;
  double predict_completed(std::span<const double> base_sq, std::span<const double> lead) const;
};

KnnModel fit_knn(const TrainMatrix& train, int k = 0);

// ---------------------------------------------------------------------------
// Convex stack over the library, weights chosen on the probability simplex to
// minimize cv_folds-fold cross-validated log loss (folds respect clusters).

struct StackedModel {
  std::vector<std::string> library;
  std::vector<double> weights;  // simplex, aligned to library
  std::optional<LogisticModel> logit;
  std::optional<GbtModel> gbt;
  std::optional<KnnModel> knn;
  bool constant = false;  // degenerate response: predictor is a constant
  double constant_value = 0.5;
  double cv_loss_stack = 0.0;
  double cv_loss_best_single = 0.0;
  std::vector<std::string> notes;

  double predict(std::span<const double> feat) const;
};

StackedModel fit_stack(const TrainMatrix& train, const LearnerSpec& spec, std::uint64_t seed);

// Euclidean projection onto the probability simplex (exposed for tests).
std::vector<double> project_to_simplex(std::vector<double> v);

}  // namespace cpe
