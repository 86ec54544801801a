#include "cpe/learners.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cpe/rng.hpp"

namespace cpe {

namespace {

double expit(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double clamp_prob(double p) { return std::min(1.0 - 1e-12, std::max(1e-12, p)); }

std::vector<int> non_constant_columns(const TrainMatrix& train) {
  std::vector<int> kept;
  for (std::size_t c = 0; c < train.cols; ++c) {
    const double first = train.x[c];
    bool varies = false;
    for (std::size_t i = 1; i < train.rows; ++i) {
      if (train.x[i * train.cols + c] != first) {
        varies = true;
        break;
      }
    }
    if (varies) kept.push_back(static_cast<int>(c));
  }
  return kept;
}

}  // namespace

void TrainMatrix::push_row(std::span<const double> feat, double response, int cluster) {
  if (rows == 0 && cols == 0) cols = feat.size();
  x.insert(x.end(), feat.begin(), feat.end());
  y.push_back(response);
  cluster_of.push_back(cluster);
  ++rows;
}

// ---------------------------------------------------------------------------
// logistic regression

double LogisticModel::linear(std::span<const double> feat) const {
  double z = beta.empty() ? 0.0 : beta[0];
  for (std::size_t k = 0; k < kept.size(); ++k) {
    z += beta[k + 1] * feat[static_cast<std::size_t>(kept[k])];
  }
  return z;
}

double LogisticModel::predict(std::span<const double> feat) const { return expit(linear(feat)); }

double logistic_nll(const TrainMatrix& train, std::span<const double> beta,
                    std::span<double> grad_out) {
  const std::size_t d = train.cols + 1;
  double nll = 0.0;
  std::fill(grad_out.begin(), grad_out.end(), 0.0);
  for (std::size_t i = 0; i < train.rows; ++i) {
    auto xi = train.row(i);
    double z = beta[0];
    for (std::size_t c = 0; c < train.cols; ++c) z += beta[c + 1] * xi[c];
    const double p = expit(z);
    nll -= train.y[i] * std::log(clamp_prob(p)) + (1.0 - train.y[i]) * std::log(clamp_prob(1.0 - p));
    const double resid = p - train.y[i];
    grad_out[0] += resid;
    for (std::size_t c = 0; c < train.cols; ++c) grad_out[c + 1] += resid * xi[c];
  }
  for (std::size_t c = 0; c < d; ++c) grad_out[c] /= static_cast<double>(train.rows);
  return nll / static_cast<double>(train.rows);
}

namespace {

struct IrlsResult {
  Eigen::VectorXd beta;
  Eigen::MatrixXd hessian;
  bool converged = false;
  bool diverged = false;
};

IrlsResult run_irls(const Eigen::MatrixXd& design, const Eigen::VectorXd& y, double ridge) {
  const Eigen::Index n = design.rows();
  const Eigen::Index d = design.cols();
  IrlsResult res;
  res.beta = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd p(n), w(n);
  for (int iter = 0; iter < 100; ++iter) {
    Eigen::VectorXd z = design * res.beta;
    for (Eigen::Index i = 0; i < n; ++i) {
      p[i] = expit(z[i]);
      w[i] = std::max(p[i] * (1.0 - p[i]), 1e-10);
    }
    Eigen::VectorXd grad = design.transpose() * (y - p) / static_cast<double>(n);
    Eigen::MatrixXd hess =
        design.transpose() * w.asDiagonal() * design / static_cast<double>(n);
    if (ridge > 0.0) {
      grad -= ridge * res.beta / static_cast<double>(n);
      hess += ridge / static_cast<double>(n) * Eigen::MatrixXd::Identity(d, d);
    }
    Eigen::VectorXd step = hess.ldlt().solve(grad);
    if (!step.allFinite()) {
      res.diverged = true;
      return res;
    }
    res.beta += step;
    res.hessian = hess;
    if (res.beta.lpNorm<Eigen::Infinity>() > 1e3) {
      res.diverged = true;
      return res;
    }
    if (grad.lpNorm<Eigen::Infinity>() < 1e-10 && step.lpNorm<Eigen::Infinity>() < 1e-10) {
      res.converged = true;
      return res;
    }
  }
  // accept a slow fit as long as the score is small
  Eigen::VectorXd z = design * res.beta;
  for (Eigen::Index i = 0; i < n; ++i) p[i] = expit(z[i]);
  Eigen::VectorXd grad = design.transpose() * (y - p) / static_cast<double>(n);
  if (ridge > 0.0) grad -= ridge * res.beta / static_cast<double>(n);
  res.converged = grad.lpNorm<Eigen::Infinity>() < 1e-6;
  res.diverged = !res.converged;
  return res;
}

// Saturated linear predictors mean the unpenalized MLE is drifting to
// infinity (separation): the score can vanish while beta keeps growing.
bool looks_separated(const Eigen::MatrixXd& design, const Eigen::VectorXd& beta) {
  return (design * beta).lpNorm<Eigen::Infinity>() > 20.0;
}

}  // namespace

LogisticModel fit_logistic(const TrainMatrix& train, double ridge) {
  if (train.rows == 0) throw Error(ErrorKind::SingularFit, "empty training data");
  LogisticModel model;
  model.cols = train.cols;
  model.kept = non_constant_columns(train);

  const Eigen::Index n = static_cast<Eigen::Index>(train.rows);
  const Eigen::Index d = static_cast<Eigen::Index>(model.kept.size()) + 1;
  Eigen::MatrixXd design(n, d);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    design(i, 0) = 1.0;
    auto xi = train.row(static_cast<std::size_t>(i));
    for (std::size_t k = 0; k < model.kept.size(); ++k) {
      design(i, static_cast<Eigen::Index>(k) + 1) = xi[static_cast<std::size_t>(model.kept[k])];
    }
    y[i] = train.y[static_cast<std::size_t>(i)];
  }

  IrlsResult res = run_irls(design, y, ridge);
  if (ridge == 0.0 && (res.diverged || looks_separated(design, res.beta))) {
    res = run_irls(design, y, 1e-3);
    model.ridged = true;
  }
  if (!res.beta.allFinite()) throw Error(ErrorKind::SingularFit, "logistic fit failed");

  model.beta.assign(res.beta.data(), res.beta.data() + res.beta.size());
  Eigen::MatrixXd cov =
      res.hessian.ldlt().solve(Eigen::MatrixXd::Identity(d, d)) / static_cast<double>(n);
  model.std_errors.resize(static_cast<std::size_t>(d));
  for (Eigen::Index k = 0; k < d; ++k) {
    model.std_errors[static_cast<std::size_t>(k)] = std::sqrt(std::max(0.0, cov(k, k)));
  }
  return model;
}

// ---------------------------------------------------------------------------
// gradient boosted trees

double GbtModel::raw_score(std::span<const double> feat) const {
  double f = base;
  for (const auto& tree : trees) {
    int node = 0;
    while (tree[static_cast<std::size_t>(node)].feature >= 0) {
      const GbtNode& nd = tree[static_cast<std::size_t>(node)];
      node = feat[static_cast<std::size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right;
    }
    f += tree[static_cast<std::size_t>(node)].leaf;
  }
  return f;
}

double GbtModel::predict(std::span<const double> feat) const { return expit(raw_score(feat)); }

namespace {

struct SplitChoice {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
};

}  // namespace

GbtModel fit_gbt(const TrainMatrix& train, const GbtParams& params, std::uint64_t seed) {
  GbtModel model;
  model.cols = train.cols;
  const std::size_t n = train.rows;
  if (n == 0) throw Error(ErrorKind::SingularFit, "empty training data");

  const double ybar = std::accumulate(train.y.begin(), train.y.end(), 0.0) / static_cast<double>(n);
  model.base = std::log(clamp_prob(ybar) / clamp_prob(1.0 - ybar));

  // global sort order per feature, shared by every tree
  std::vector<std::vector<int>> order(train.cols);
  for (std::size_t c = 0; c < train.cols; ++c) {
    order[c].resize(n);
    std::iota(order[c].begin(), order[c].end(), 0);
    std::stable_sort(order[c].begin(), order[c].end(), [&](int a, int b) {
      return train.x[static_cast<std::size_t>(a) * train.cols + c] <
             train.x[static_cast<std::size_t>(b) * train.cols + c];
    });
  }

  std::vector<double> score(n, model.base);
  std::vector<double> grad(n), hess(n);
  std::vector<char> in_sample(n);
  std::vector<int> node_of(n);

  const int max_nodes_per_level = 1 << params.depth;
  std::vector<double> acc_g(static_cast<std::size_t>(max_nodes_per_level));
  std::vector<double> acc_h(static_cast<std::size_t>(max_nodes_per_level));
  std::vector<int> acc_c(static_cast<std::size_t>(max_nodes_per_level));
  std::vector<double> tot_g(static_cast<std::size_t>(max_nodes_per_level));
  std::vector<double> tot_h(static_cast<std::size_t>(max_nodes_per_level));
  std::vector<int> tot_c(static_cast<std::size_t>(max_nodes_per_level));
  std::vector<double> prev_val(static_cast<std::size_t>(max_nodes_per_level));
  std::vector<char> seen(static_cast<std::size_t>(max_nodes_per_level));
  std::vector<SplitChoice> best(static_cast<std::size_t>(max_nodes_per_level));

  for (int t = 0; t < params.n_trees; ++t) {
    Rng rng(seed, Stream::GbtTree, static_cast<std::uint64_t>(t));
    std::size_t sampled = 0;
    for (std::size_t i = 0; i < n; ++i) {
      in_sample[i] = params.subsample >= 1.0 || rng.uniform() < params.subsample;
      sampled += in_sample[i] ? 1u : 0u;
      const double p = expit(score[i]);
      grad[i] = p - train.y[i];
      hess[i] = std::max(p * (1.0 - p), 1e-12);
    }
    if (sampled == 0) continue;

    std::fill(node_of.begin(), node_of.end(), 0);
    std::vector<GbtNode> tree(1);
    std::vector<int> level_nodes{0};  // tree indices of the current level

    for (int level = 0; level < params.depth && !level_nodes.empty(); ++level) {
      const int n_level = static_cast<int>(level_nodes.size());
      std::fill(tot_g.begin(), tot_g.begin() + n_level, 0.0);
      std::fill(tot_h.begin(), tot_h.begin() + n_level, 0.0);
      std::fill(tot_c.begin(), tot_c.begin() + n_level, 0);
      for (std::size_t i = 0; i < n; ++i) {
        if (!in_sample[i] || node_of[i] < 0) continue;
        tot_g[static_cast<std::size_t>(node_of[i])] += grad[i];
        tot_h[static_cast<std::size_t>(node_of[i])] += hess[i];
        tot_c[static_cast<std::size_t>(node_of[i])] += 1;
      }
      for (int s = 0; s < n_level; ++s) best[static_cast<std::size_t>(s)] = SplitChoice{};

      for (std::size_t c = 0; c < train.cols; ++c) {
        std::fill(acc_g.begin(), acc_g.begin() + n_level, 0.0);
        std::fill(acc_h.begin(), acc_h.begin() + n_level, 0.0);
        std::fill(acc_c.begin(), acc_c.begin() + n_level, 0);
        std::fill(seen.begin(), seen.begin() + n_level, 0);
        for (int idx : order[c]) {
          const std::size_t i = static_cast<std::size_t>(idx);
          if (!in_sample[i] || node_of[i] < 0) continue;
          const int s = node_of[i];
          const double v = train.x[i * train.cols + c];
          if (seen[static_cast<std::size_t>(s)] && v > prev_val[static_cast<std::size_t>(s)]) {
            // candidate split between the previous and current value
            const double gl = acc_g[static_cast<std::size_t>(s)];
            const double hl = acc_h[static_cast<std::size_t>(s)];
            const int cl = acc_c[static_cast<std::size_t>(s)];
            const double gr = tot_g[static_cast<std::size_t>(s)] - gl;
            const double hr = tot_h[static_cast<std::size_t>(s)] - hl;
            const int cr = tot_c[static_cast<std::size_t>(s)] - cl;
            if (cl >= params.min_leaf && cr >= params.min_leaf) {
              const double gain = gl * gl / (hl + params.l2) + gr * gr / (hr + params.l2) -
                                  (gl + gr) * (gl + gr) / (hl + hr + params.l2);
              if (gain > best[static_cast<std::size_t>(s)].gain + params.min_gain) {
                best[static_cast<std::size_t>(s)] = {
                    gain, static_cast<int>(c), 0.5 * (prev_val[static_cast<std::size_t>(s)] + v)};
              }
            }
          }
          acc_g[static_cast<std::size_t>(s)] += grad[i];
          acc_h[static_cast<std::size_t>(s)] += hess[i];
          acc_c[static_cast<std::size_t>(s)] += 1;
          prev_val[static_cast<std::size_t>(s)] = v;
          seen[static_cast<std::size_t>(s)] = 1;
        }
      }

      // materialize the accepted splits and reassign rows
      std::vector<int> next_level;
      std::vector<int> child_slot(static_cast<std::size_t>(n_level), -1);
      for (int s = 0; s < n_level; ++s) {
        const SplitChoice& ch = best[static_cast<std::size_t>(s)];
        const int tree_idx = level_nodes[static_cast<std::size_t>(s)];
        if (ch.feature < 0) continue;
        child_slot[static_cast<std::size_t>(s)] = static_cast<int>(next_level.size());
        GbtNode& nd = tree[static_cast<std::size_t>(tree_idx)];
        nd.feature = ch.feature;
        nd.threshold = ch.threshold;
        nd.left = static_cast<int>(tree.size());
        nd.right = nd.left + 1;
        tree.emplace_back();
        tree.emplace_back();
        next_level.push_back(nd.left);
        next_level.push_back(nd.right);
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (node_of[i] < 0) continue;
        const int s = node_of[i];
        const SplitChoice& ch = best[static_cast<std::size_t>(s)];
        if (ch.feature < 0) {
          node_of[i] = -1 - level_nodes[static_cast<std::size_t>(s)];  // settled in a leaf
          continue;
        }
        const bool left = train.x[i * train.cols + static_cast<std::size_t>(ch.feature)] <=
                          ch.threshold;
        node_of[i] = child_slot[static_cast<std::size_t>(s)] + (left ? 0 : 1);
      }
      // remap node_of from slot*2+side to position in next_level
      level_nodes = std::move(next_level);
    }

    // Newton leaf values over the full sample (settled rows carry -1-tree_idx)
    std::vector<double> leaf_g(tree.size(), 0.0);
    std::vector<double> leaf_h(tree.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (!in_sample[i]) continue;
      int tree_idx;
      if (node_of[i] < 0) {
        tree_idx = -1 - node_of[i];
      } else {
        tree_idx = level_nodes[static_cast<std::size_t>(node_of[i])];
      }
      leaf_g[static_cast<std::size_t>(tree_idx)] += grad[i];
      leaf_h[static_cast<std::size_t>(tree_idx)] += hess[i];
    }
    for (std::size_t nd = 0; nd < tree.size(); ++nd) {
      if (tree[nd].feature < 0) {
        tree[nd].leaf = -params.learning_rate * leaf_g[nd] / (leaf_h[nd] + params.l2);
      }
    }

    // update scores for all rows (not just the subsample)
    for (std::size_t i = 0; i < n; ++i) {
      int node = 0;
      while (tree[static_cast<std::size_t>(node)].feature >= 0) {
        const GbtNode& nd = tree[static_cast<std::size_t>(node)];
        node = train.x[i * train.cols + static_cast<std::size_t>(nd.feature)] <= nd.threshold
                   ? nd.left
                   : nd.right;
      }
      score[i] += tree[static_cast<std::size_t>(node)].leaf;
    }
    model.trees.push_back(std::move(tree));
  }
  return model;
}

// ---------------------------------------------------------------------------
// k nearest neighbors

KnnModel fit_knn(const TrainMatrix& train, int k) {
  if (train.rows == 0) throw Error(ErrorKind::SingularFit, "empty training data");
  KnnModel model;
  model.cols = train.cols;
  model.k = k > 0 ? k : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(train.rows))));
  model.k = std::min<int>(model.k, static_cast<int>(train.rows));
  model.mean.assign(train.cols, 0.0);
  model.inv_sd.assign(train.cols, 0.0);
  for (std::size_t c = 0; c < train.cols; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < train.rows; ++i) s += train.x[i * train.cols + c];
    model.mean[c] = s / static_cast<double>(train.rows);
    double ss = 0.0;
    for (std::size_t i = 0; i < train.rows; ++i) {
      const double d = train.x[i * train.cols + c] - model.mean[c];
      ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(train.rows));
    model.inv_sd[c] = sd > 1e-12 ? 1.0 / sd : 0.0;  // constant dims carry no distance
  }
  model.xz.resize(train.rows * train.cols);
  for (std::size_t i = 0; i < train.rows; ++i) {
    for (std::size_t c = 0; c < train.cols; ++c) {
      model.xz[i * train.cols + c] =
          (train.x[i * train.cols + c] - model.mean[c]) * model.inv_sd[c];
    }
  }
  model.y = train.y;
  return model;
}

namespace {

double knn_average(const KnnModel& model, std::vector<std::pair<double, int>>& dist) {
  const std::size_t k = static_cast<std::size_t>(model.k);
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k - 1), dist.end());
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += model.y[static_cast<std::size_t>(dist[i].second)];
  return s / static_cast<double>(k);
}

}  // namespace

double KnnModel::predict(std::span<const double> feat) const {
  const std::size_t nrows = y.size();
  std::vector<std::pair<double, int>> dist(nrows);
  std::vector<double> q(cols);
  for (std::size_t c = 0; c < cols; ++c) q[c] = (feat[c] - mean[c]) * inv_sd[c];
  for (std::size_t i = 0; i < nrows; ++i) {
    double d = 0.0;
    const double* xi = xz.data() + i * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      const double diff = q[c] - xi[c];
      d += diff * diff;
    }
    dist[i] = {d, static_cast<int>(i)};
  }
  return knn_average(*this, dist);
}

std::vector<double> KnnModel::partial_sq_dist(std::span<const double> feat,
                                              std::size_t from_dim) const {
  const std::size_t nrows = y.size();
  std::vector<double> base(nrows, 0.0);
  for (std::size_t i = 0; i < nrows; ++i) {
    double d = 0.0;
    const double* xi = xz.data() + i * cols;
    for (std::size_t c = from_dim; c < cols; ++c) {
      const double diff = (feat[c] - mean[c]) * inv_sd[c] - xi[c];
      d += diff * diff;
    }
    base[i] = d;
  }
  return base;
}

double KnnModel::predict_completed(std::span<const double> base_sq,
                                   std::span<const double> lead) const {
  const std::size_t nrows = y.size();
  std::vector<std::pair<double, int>> dist(nrows);
  std::vector<double> q(lead.size());
  for (std::size_t c = 0; c < lead.size(); ++c) q[c] = (lead[c] - mean[c]) * inv_sd[c];
  for (std::size_t i = 0; i < nrows; ++i) {
    double d = base_sq[i];
    const double* xi = xz.data() + i * cols;
    for (std::size_t c = 0; c < lead.size(); ++c) {
      const double diff = q[c] - xi[c];
      d += diff * diff;
    }
    dist[i] = {d, static_cast<int>(i)};
  }
  return knn_average(*this, dist);
}

// ---------------------------------------------------------------------------
// stacking

std::vector<double> project_to_simplex(std::vector<double> v) {
  std::vector<double> u = v;
  std::sort(u.begin(), u.end(), std::greater<double>());
  double css = 0.0;
  double theta = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    css += u[i];
    const double candidate = (css - 1.0) / static_cast<double>(i + 1);
    if (u[i] - candidate > 0.0) theta = candidate;
  }
  for (auto& w : v) w = std::max(0.0, w - theta);
  return v;
}

double StackedModel::predict(std::span<const double> feat) const {
  if (constant) return constant_value;
  double p = 0.0;
  for (std::size_t l = 0; l < library.size(); ++l) {
    if (weights[l] == 0.0) continue;
    double pl = 0.0;
    if (library[l] == "logit") {
      pl = logit->predict(feat);
    } else if (library[l] == "gbt") {
      pl = gbt->predict(feat);
    } else {
      pl = knn->predict(feat);
    }
    p += weights[l] * pl;
  }
  return p;
}

namespace {

double stack_loss(const std::vector<double>& pred, const std::vector<double>& y,
                  const std::vector<double>& w, std::size_t n_learners,
                  std::vector<double>* grad_out) {
  const std::size_t n = y.size();
  double loss = 0.0;
  if (grad_out) std::fill(grad_out->begin(), grad_out->end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double q = 0.0;
    for (std::size_t l = 0; l < n_learners; ++l) q += w[l] * pred[i * n_learners + l];
    q = clamp_prob(q);
    loss -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
    if (grad_out) {
      const double dq = (q - y[i]) / (q * (1.0 - q));
      for (std::size_t l = 0; l < n_learners; ++l) {
        (*grad_out)[l] += dq * pred[i * n_learners + l];
      }
    }
  }
  loss /= static_cast<double>(n);
  if (grad_out) {
    for (auto& g : *grad_out) g /= static_cast<double>(n);
  }
  return loss;
}

void fit_one(const std::string& name, const TrainMatrix& data, std::uint64_t seed,
             StackedModel& out) {
  if (name == "logit") {
    out.logit = fit_logistic(data);
    if (out.logit->ridged) out.notes.push_back("separation: logit fell back to ridge");
  } else if (name == "gbt") {
    out.gbt = fit_gbt(data, GbtParams{}, seed);
  } else if (name == "knn") {
    out.knn = fit_knn(data);
  } else {
    throw Error(ErrorKind::UnknownLearner, "unknown learner '" + name + "'");
  }
}

double predict_one(const std::string& name, const StackedModel& m, std::span<const double> feat) {
  if (name == "logit") return m.logit->predict(feat);
  if (name == "gbt") return m.gbt->predict(feat);
  return m.knn->predict(feat);
}

}  // namespace

StackedModel fit_stack(const TrainMatrix& train, const LearnerSpec& spec, std::uint64_t seed) {
  StackedModel model;
  if (spec.library.empty()) {
    throw Error(ErrorKind::BadConfig, "learner library is empty");
  }
  for (const auto& name : spec.library) {
    if (name != "logit" && name != "gbt" && name != "knn") {
      throw Error(ErrorKind::UnknownLearner, "unknown learner '" + name + "'");
    }
  }
  if (spec.cv_folds < 2) throw Error(ErrorKind::BadConfig, "cv_folds must be at least 2");
  model.library = spec.ensemble ? spec.library : std::vector<std::string>{"logit"};

  const std::size_t n = train.rows;
  if (n == 0) throw Error(ErrorKind::SingularFit, "empty training data");

  const double ybar = std::accumulate(train.y.begin(), train.y.end(), 0.0) / static_cast<double>(n);
  if (ybar == 0.0 || ybar == 1.0) {
    model.constant = true;
    model.constant_value = ybar;
    model.weights.assign(model.library.size(), 0.0);
    model.notes.push_back("constant response: returning a clipped constant");
    return model;
  }

  const std::size_t n_learners = model.library.size();
  if (n_learners == 1) {
    fit_one(model.library[0], train, seed, model);
    model.weights = {1.0};
    return model;
  }

  // fold by cluster so stacking never sees units from an evaluation cluster
  std::vector<int> cluster_ids = train.cluster_of;
  std::sort(cluster_ids.begin(), cluster_ids.end());
  cluster_ids.erase(std::unique(cluster_ids.begin(), cluster_ids.end()), cluster_ids.end());
  Rng fold_rng(seed, Stream::StackFolds);
  fold_rng.shuffle(cluster_ids);
  const int folds = std::min<int>(spec.cv_folds, static_cast<int>(cluster_ids.size()));
  std::vector<int> fold_of_cluster;  // dense map by position in cluster_ids
  std::vector<int> cluster_index(cluster_ids.size());
  std::vector<std::pair<int, int>> lookup;  // (cluster id, fold)
  lookup.reserve(cluster_ids.size());
  for (std::size_t i = 0; i < cluster_ids.size(); ++i) {
    lookup.emplace_back(cluster_ids[i], static_cast<int>(i % static_cast<std::size_t>(folds)));
  }
  std::sort(lookup.begin(), lookup.end());
  auto fold_of = [&](int cluster) {
    auto it = std::lower_bound(lookup.begin(), lookup.end(), std::make_pair(cluster, -1));
    return it->second;
  };

  std::vector<double> cv_pred(n * n_learners, 0.0);
  for (int v = 0; v < folds; ++v) {
    TrainMatrix sub;
    sub.cols = train.cols;
    for (std::size_t i = 0; i < n; ++i) {
      if (fold_of(train.cluster_of[i]) != v) sub.push_row(train.row(i), train.y[i], train.cluster_of[i]);
    }
    StackedModel fold_fit;
    fold_fit.library = model.library;
    for (std::size_t l = 0; l < n_learners; ++l) {
      fit_one(model.library[l], sub, seed + 1000003ULL * static_cast<std::uint64_t>(v + 1), fold_fit);
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (fold_of(train.cluster_of[i]) != v) continue;
      for (std::size_t l = 0; l < n_learners; ++l) {
        cv_pred[i * n_learners + l] = predict_one(model.library[l], fold_fit, train.row(i));
      }
    }
  }

  // projected gradient descent on the simplex
  std::vector<double> w(n_learners, 1.0 / static_cast<double>(n_learners));
  std::vector<double> grad(n_learners);
  for (int iter = 0; iter < 200; ++iter) {
    stack_loss(cv_pred, train.y, w, n_learners, &grad);
    std::vector<double> next(n_learners);
    for (std::size_t l = 0; l < n_learners; ++l) next[l] = w[l] - 0.1 * grad[l];
    next = project_to_simplex(std::move(next));
    double delta = 0.0;
    for (std::size_t l = 0; l < n_learners; ++l) delta = std::max(delta, std::abs(next[l] - w[l]));
    w = std::move(next);
    if (delta < 1e-9) break;
  }

  // the stack must not lose to any single learner on the stacking fit
  double best_loss = stack_loss(cv_pred, train.y, w, n_learners, nullptr);
  std::vector<double> best_w = w;
  double best_single = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < n_learners; ++l) {
    std::vector<double> vertex(n_learners, 0.0);
    vertex[l] = 1.0;
    const double loss_l = stack_loss(cv_pred, train.y, vertex, n_learners, nullptr);
    best_single = std::min(best_single, loss_l);
    if (loss_l < best_loss) {
      best_loss = loss_l;
      best_w = vertex;
    }
  }
  model.weights = best_w;
  model.cv_loss_stack = best_loss;
  model.cv_loss_best_single = best_single;

  for (std::size_t l = 0; l < n_learners; ++l) {
    fit_one(model.library[l], train, seed, model);
  }
  return model;
}

}  // namespace cpe
