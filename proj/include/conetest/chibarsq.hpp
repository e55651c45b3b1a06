#pragma once

#include "conetest/cone.hpp"
#include "conetest/structure.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace conetest {

/// Chi-square CDF; df = 0 is the point mass at zero.
double chi2_cdf(int df, double x);
/// Survival function 1 - chi2_cdf, computed without cancellation.
double chi2_sf(int df, double x);

struct ChiBarSample {
    std::vector<double> draws;
    std::uint64_t seed = 0;
    int M = 0;
};

/// X_i = Z_i^T V^-1 Z_i - min over the cone of (Z_i - t)^T V^-1 (Z_i - t) with
/// Z_i ~ N(0, V). Draw i uses the Philox stream (seed, i) whatever `workers`.
ChiBarSample draw_sample(const Cone& cone, const Eigen::MatrixXd& V, int M, std::uint64_t seed, int workers = 1);

struct WeightEstimate {
    std::vector<int> dfs;
    Eigen::VectorXd weights;
    Eigen::VectorXd sd;
    bool exact = false;
    Eigen::MatrixXd covariance;  // of the weights; zero when exact
    std::vector<double> thresholds;
    std::vector<std::string> warnings;
};

/// Closed forms: one half-line (weights 1/2, 1/2) or a linear cone (weight 1).
std::optional<WeightEstimate> exact_weights(const Cone& cone, const ConeDims& dims);

/// The linear system A w = b of the Monte Carlo weight estimator.
struct WeightSystem {
    Eigen::MatrixXd A;
    Eigen::VectorXd b;
    Eigen::MatrixXd b_covariance;
    std::vector<double> thresholds;
};

/// Empirical quantiles of the positive draws at evenly spaced levels in
/// [0.15, 0.85] (0.5 when only one threshold is needed).
std::vector<double> weight_thresholds(const ChiBarSample& sample, int count);
WeightSystem weight_system(const ChiBarSample& sample, const ConeDims& dims);
/// Same system with b built from given CDF values at the thresholds.
WeightSystem weight_system(const ConeDims& dims, const std::vector<double>& thresholds,
                           const Eigen::VectorXd& cdf_values, int M);
WeightEstimate solve_weights(const WeightSystem& system, const ConeDims& dims);
WeightEstimate estimate_weights(const ChiBarSample& sample, const ConeDims& dims);

double pvalue_from_weights(const WeightEstimate& w, double lrt);
/// Fraction of draws >= lrt. Zero means the estimate underflowed the sample.
double pvalue_from_sample(const ChiBarSample& sample, double lrt);
std::pair<double, double> pvalue_bounds(double lrt, const ConeDims& dims);

}  // namespace conetest
