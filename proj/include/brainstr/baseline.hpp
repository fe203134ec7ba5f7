#pragma once

// Static-FC baseline: whole-recording Pearson FC, upper-triangle features
// standardized on the training fold, L2-penalized logistic regression fitted
// by Newton's method. Used to show the synthetic task is learnable at all.

#include <cmath>
#include <cstdint>
#include <vector>

#include "errors.hpp"
#include "segfc.hpp"
#include "synthgen.hpp"
#include "trainer.hpp"

namespace brainstr {

struct LogisticConfig {
    double l2 = 1.0;       // penalty on the weights, not the intercept
    int max_iter = 100;
    double tolerance = 1e-10; // Newton step norm
};

struct LogisticModel {
    Vector mean, scale; // feature standardization from the training set
    Vector weight;
    double intercept = 0.0;

    double predict(const RowVector& x) const {
        const double z = ((x.transpose() - mean).cwiseQuotient(scale)).dot(weight) + intercept;
        return 1.0 / (1.0 + std::exp(-z));
    }
};

// Upper triangle of the whole-recording FC, row-major (i < j).
inline RowVector static_fc_features(const Matrix& signal) {
    const Matrix fc = pearson_fc(signal);
    const Index n = fc.rows();
    RowVector f(n * (n - 1) / 2);
    Index k = 0;
    for (Index i = 0; i < n; ++i)
        for (Index j = i + 1; j < n; ++j) f(k++) = fc(i, j);
    return f;
}

inline LogisticModel fit_logistic(const Matrix& x, const std::vector<int>& y, const LogisticConfig& cfg = {}) {
    const Index m = x.rows(), d = x.cols();
    if (m == 0 || static_cast<Index>(y.size()) != m) throw DimensionError("fit_logistic: bad training set");
    LogisticModel model;
    model.mean = x.colwise().mean().transpose();
    model.scale = ((x.rowwise() - model.mean.transpose()).colwise().squaredNorm() / static_cast<double>(m))
                      .cwiseSqrt()
                      .transpose();
    for (Index j = 0; j < d; ++j)
        if (!(model.scale(j) > 1e-12)) model.scale(j) = 1.0;
    Matrix z(m, d + 1);
    z.leftCols(d) = (x.rowwise() - model.mean.transpose()).array().rowwise() / model.scale.transpose().array();
    z.col(d).setOnes();
    Vector yv(m);
    for (Index i = 0; i < m; ++i) yv(i) = y[static_cast<std::size_t>(i)];

    Vector beta = Vector::Zero(d + 1);
    Vector penalty = Vector::Constant(d + 1, cfg.l2);
    penalty(d) = 0.0;
    for (int it = 0; it < cfg.max_iter; ++it) {
        const Vector p = (-(z * beta)).array().exp().unaryExpr([](double e) { return 1.0 / (1.0 + e); });
        const Vector grad = z.transpose() * (p - yv) + penalty.cwiseProduct(beta);
        const Vector w = p.cwiseProduct(Vector::Ones(m) - p);
        Matrix h = z.transpose() * w.asDiagonal() * z;
        h.diagonal() += penalty;
        h.diagonal().array() += 1e-12; // keeps the intercept row solvable when w underflows
        const Vector step = h.ldlt().solve(grad);
        beta -= step;
        if (step.norm() < cfg.tolerance) break;
    }
    model.weight = beta.head(d);
    model.intercept = beta(d);
    return model;
}

struct BaselineReport {
    std::vector<Metrics> folds;
    double mean_accuracy = 0.0;
    double mean_auc = 0.0;
};

// Same stratified folds as run_cv for the given seed.
inline BaselineReport run_static_baseline(const std::vector<BoldRecording>& data, int folds, std::uint64_t seed,
                                          const LogisticConfig& cfg = {}) {
    if (data.empty()) throw ConfigError("baseline: empty dataset");
    std::vector<int> labels;
    Matrix feats(static_cast<Index>(data.size()), data.front().n_rois() * (data.front().n_rois() - 1) / 2);
    for (std::size_t i = 0; i < data.size(); ++i) {
        labels.push_back(data[i].label);
        feats.row(static_cast<Index>(i)) = static_fc_features(data[i].signal);
    }
    const auto split = stratified_folds(labels, folds, seed);
    BaselineReport r;
    for (int k = 0; k < folds; ++k) {
        std::vector<std::size_t> train;
        for (int j = 0; j < folds; ++j)
            if (j != k) train.insert(train.end(), split[j].begin(), split[j].end());
        Matrix x(static_cast<Index>(train.size()), feats.cols());
        std::vector<int> y;
        for (std::size_t i = 0; i < train.size(); ++i) {
            x.row(static_cast<Index>(i)) = feats.row(static_cast<Index>(train[i]));
            y.push_back(labels[train[i]]);
        }
        const LogisticModel m = fit_logistic(x, y, cfg);
        std::vector<double> scores;
        std::vector<int> truth;
        for (std::size_t i : split[static_cast<std::size_t>(k)]) {
            scores.push_back(m.predict(feats.row(static_cast<Index>(i))));
            truth.push_back(labels[i]);
        }
        r.folds.push_back(compute_metrics(scores, truth));
        r.mean_accuracy += r.folds.back().accuracy / folds;
        r.mean_auc += r.folds.back().auc / folds;
    }
    return r;
}

} // namespace brainstr
