#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "fmm/errors.hpp"
#include "fmm/harness.hpp"
#include "fmm/parallel.hpp"

namespace fmm {

namespace {

using EMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

EMatrix rows_of(const Matrix& x, std::span<const std::size_t> rows) {
  EMatrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(x.cols));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.rows) throw ValueError("row index " + std::to_string(rows[r]) + " out of range");
    for (std::size_t c = 0; c < x.cols; ++c) out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = x(rows[r], c);
  }
  return out;
}

void check_finite(const Matrix& x) {
  for (double v : x.values) {
    if (!std::isfinite(v)) throw ValueError("probe features contain a non-finite value");
  }
}

}  // namespace

Matrix extract_features(const Model& model, const PreparedCohort& data, const std::vector<Tensor>* ts_cache,
                        std::size_t jobs) {
  if (ts_cache && ts_cache->size() != data.size()) throw ShapeError("extract_features: TS cache does not cover the cohort");
  std::vector<Tensor> rows(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) {
    if (!ts_cache || model.config.modality == Modality::fc) {
      rows[i] = extract_fused(model, data.subjects[i]);
      return;
    }
    Graph g(false);
    Params p(g, model.params, nullptr);
    Var rc;
    if (model.config.modality != Modality::ts) rc = fc_encode(p, model.config.fc, data.subjects[i].fc);
    rows[i] = combine_streams(p, model.config, p.constant((*ts_cache)[i]), rc).value();
  });
  const std::size_t d = rows.empty() ? 0 : rows[0].numel();
  Matrix out(data.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out(i, j) = rows[i].at(j);
  }
  return out;
}

Matrix raw_fc_features(const PreparedCohort& data) {
  if (data.size() == 0) return {};
  const std::size_t n = data.subjects[0].fc.rows;
  Matrix out(data.size(), n * (n - 1) / 2);
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto& fc = data.subjects[s].fc;
    if (fc.rows != n) throw ShapeError("raw_fc_features: subjects differ in ROI count");
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) out(s, k++) = fc(i, j);
    }
  }
  return out;
}

Matrix raw_ts_features(const PreparedCohort& data) {
  if (data.size() == 0) return {};
  const std::size_t d = data.subjects[0].tokens.values.size();
  Matrix out(data.size(), d);
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto& v = data.subjects[s].tokens.values;
    if (v.size() != d) throw ShapeError("raw_ts_features: subjects differ in token count");
    std::copy(v.begin(), v.end(), out.row(s).begin());
  }
  return out;
}

Matrix Pca::transform(const Matrix& x) const {
  if (x.cols != mean.size()) throw ShapeError("Pca::transform: width " + std::to_string(x.cols) + " != " + std::to_string(mean.size()));
  Matrix out(x.rows, components.rows);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t c = 0; c < components.rows; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < x.cols; ++j) acc += (x(r, j) - mean[j]) * components(c, j);
      out(r, c) = acc;
    }
  }
  return out;
}

Pca fit_pca(const Matrix& x, std::span<const std::size_t> rows, std::size_t components) {
  if (rows.size() < 2) throw ValueError("fit_pca: need at least two rows");
  const std::size_t c = components == 0 ? std::min<std::size_t>({10, rows.size() - 1, x.cols}) : components;
  if (c > std::min(rows.size() - 1, x.cols)) throw ValueError("fit_pca: too many components requested");
  EMatrix a = rows_of(x, rows);
  const Eigen::RowVectorXd mu = a.colwise().mean();
  a.rowwise() -= mu;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinV);
  Pca pca;
  pca.mean.assign(mu.data(), mu.data() + mu.size());
  pca.components = Matrix(c, x.cols);
  const double denom = static_cast<double>(rows.size() - 1);
  for (std::size_t k = 0; k < c; ++k) {
    Eigen::VectorXd v = svd.matrixV().col(static_cast<Eigen::Index>(k));
    // Fix the sign so the largest-magnitude loading is positive.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (std::size_t j = 0; j < x.cols; ++j) pca.components(k, j) = v(static_cast<Eigen::Index>(j));
    const double s = svd.singularValues()(static_cast<Eigen::Index>(k));
    pca.eigenvalues.push_back(s * s / denom);
  }
  return pca;
}

std::string to_string(ProbeKind k) { return k == ProbeKind::ridge ? "ridge" : "knn"; }

ProbeKind parse_probe_kind(const std::string& name) {
  if (name == "ridge") return ProbeKind::ridge;
  if (name == "knn") return ProbeKind::knn;
  throw ValueError("unknown probe '" + name + "' (expected one of ridge, knn)");
}

std::vector<double> probe_scores(const Matrix& x, std::span<const int> labels, std::span<const std::size_t> train,
                                 std::span<const std::size_t> query, const ProbeConfig& cfg) {
  if (labels.size() != x.rows) throw ShapeError("probe: " + std::to_string(labels.size()) + " labels for " + std::to_string(x.rows) + " rows");
  if (train.empty()) throw ValueError("probe: empty training set");
  check_finite(x);
  EMatrix xt = rows_of(x, train), xq = rows_of(x, query);
  // Standardise with training statistics; constant columns are only centred.
  const Eigen::RowVectorXd mu = xt.colwise().mean();
  xt.rowwise() -= mu;
  xq.rowwise() -= mu;
  if (cfg.standardize) {
    Eigen::RowVectorXd sd = (xt.array().square().colwise().sum() / static_cast<double>(train.size())).sqrt();
    for (Eigen::Index j = 0; j < sd.size(); ++j) {
      if (sd(j) <= 1e-12) sd(j) = 1.0;
    }
    xt.array().rowwise() /= sd.array();
    xq.array().rowwise() /= sd.array();
  }
  std::vector<double> out(query.size());
  if (cfg.kind == ProbeKind::ridge) {
    if (!(cfg.lambda > 0.0)) throw ValueError("ridge lambda must be > 0");
    Eigen::VectorXd y(static_cast<Eigen::Index>(train.size()));
    for (std::size_t i = 0; i < train.size(); ++i) y(static_cast<Eigen::Index>(i)) = labels[train[i]] == 1 ? 1.0 : -1.0;
    const double y_mean = y.mean();
    y.array() -= y_mean;
    const Eigen::Index n = xt.rows(), d = xt.cols();
    Eigen::VectorXd w;
    if (n <= d) {  // dual form: w = X^T (X X^T + lambda I)^-1 y
      Eigen::MatrixXd gram = xt * xt.transpose();
      gram.diagonal().array() += cfg.lambda;
      w = xt.transpose() * gram.ldlt().solve(y);
    } else {
      Eigen::MatrixXd cov = xt.transpose() * xt;
      cov.diagonal().array() += cfg.lambda;
      w = cov.ldlt().solve(xt.transpose() * y);
    }
    const Eigen::VectorXd s = (xq * w).array() + y_mean;
    for (std::size_t i = 0; i < query.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-s(static_cast<Eigen::Index>(i))));
  } else {
    if (cfg.neighbours == 0 || cfg.neighbours > train.size()) {
      throw ValueError("knn: k=" + std::to_string(cfg.neighbours) + " with " + std::to_string(train.size()) + " training rows");
    }
    std::vector<std::pair<double, std::size_t>> dist(train.size());
    for (std::size_t q = 0; q < query.size(); ++q) {
      for (std::size_t i = 0; i < train.size(); ++i) {
        dist[i] = {(xt.row(static_cast<Eigen::Index>(i)) - xq.row(static_cast<Eigen::Index>(q))).squaredNorm(), train[i]};
      }
      // Ties in distance go to the lower subject index.
      std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(cfg.neighbours), dist.end());
      std::size_t positive = 0;
      for (std::size_t k = 0; k < cfg.neighbours; ++k) positive += static_cast<std::size_t>(labels[dist[k].second]);
      out[q] = static_cast<double>(positive) / static_cast<double>(cfg.neighbours);
    }
  }
  return out;
}

MetricsReport linear_probe(const std::vector<Matrix>& fold_features, std::span<const int> labels, const FoldSplit& split,
                           const ProbeConfig& cfg) {
  if (fold_features.size() != split.folds.size()) throw ShapeError("linear_probe: one feature matrix per fold expected");
  check_split(split, labels);
  MetricsReport r;
  r.experiment_id = "probe_" + to_string(cfg.kind);
  for (std::size_t f = 0; f < split.folds.size(); ++f) {
    const auto train = split.train_indices(f);
    const auto& test = split.folds[f];
    std::vector<int> y;
    for (std::size_t i : test) y.push_back(labels[i]);
    r.evaluations.push_back({"fold" + std::to_string(f), compute_metrics(probe_scores(fold_features[f], labels, train, test, cfg), y), {}});
  }
  summarize(r);
  r.details = Json{{"probe", to_string(cfg.kind)}, {"lambda", cfg.lambda}, {"neighbours", cfg.neighbours},
                   {"standardize", cfg.standardize}};
  return r;
}

MetricsReport linear_probe(const Matrix& features, std::span<const int> labels, const ProbeConfig& cfg, std::size_t k,
                           std::uint64_t seed) {
  if (labels.size() < 2 * k) {
    throw ValueError("linear_probe: " + std::to_string(labels.size()) + " subjects is too few for " + std::to_string(k) + " folds");
  }
  const FoldSplit split = stratified_kfold(labels, k, seed);
  return linear_probe(std::vector<Matrix>(k, features), labels, split, cfg);
}

}  // namespace fmm
