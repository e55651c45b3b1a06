#include "conetest/chibarsq.hpp"

#include "conetest/errors.hpp"
#include "conetest/parallel.hpp"
#include "conetest/rng.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>

namespace conetest {

using Eigen::MatrixXd;
using Eigen::VectorXd;

double chi2_cdf(int df, double x) {
    if (df < 0) throw ValidationError("chi-square degrees of freedom must be non-negative");
    if (!std::isfinite(x)) {
        if (std::isnan(x)) throw ValidationError("chi-square argument must be finite");
        return x > 0 ? 1.0 : 0.0;
    }
    if (x < 0) return 0.0;
    if (df == 0) return 1.0;
    if (x == 0) return 0.0;
    return boost::math::gamma_p(0.5 * df, 0.5 * x);
}

double chi2_sf(int df, double x) {
    if (df < 0) throw ValidationError("chi-square degrees of freedom must be non-negative");
    if (std::isnan(x)) throw ValidationError("chi-square argument must be finite");
    if (x < 0) return 1.0;
    if (df == 0) return 0.0;
    if (x == 0) return 1.0;
    if (std::isinf(x)) return 0.0;
    return boost::math::gamma_q(0.5 * df, 0.5 * x);
}

ChiBarSample draw_sample(const Cone& cone, const MatrixXd& V, int M, std::uint64_t seed, int workers) {
    const int q = cone.q();
    if (M < 1) throw ValidationError("Monte Carlo sample size must be positive");
    if (V.rows() != q || V.cols() != q) throw MetricError("covariance dimension differs from the cone dimension");
    if (!V.allFinite()) throw MetricError("covariance has non-finite entries");

    // Rescale by a power of two so the draws do not depend on the overall
    // magnitude of V.
    int exponent = 0;
    if (q > 0) std::frexp(V.diagonal().cwiseAbs().maxCoeff(), &exponent);
    const MatrixXd Vn = std::ldexp(1.0, -exponent) * V;

    Eigen::LLT<MatrixXd> llt(Vn);
    if (q > 0 && llt.info() != Eigen::Success) throw MetricError("covariance is not positive definite");
    const MatrixXd L = llt.matrixL();
    MatrixXd W = llt.solve(MatrixXd::Identity(q, q));
    W = 0.5 * (W + W.transpose()).eval();
    const Projector projector(cone, W);

    ChiBarSample sample;
    sample.seed = seed;
    sample.M = M;
    sample.draws.assign(static_cast<std::size_t>(M), 0.0);
    parallel_for(static_cast<std::size_t>(M), workers, [&](std::size_t i) {
        NormalStream stream(seed, i);
        VectorXd xi(q);
        for (int k = 0; k < q; ++k) xi(k) = stream.normal();
        const VectorXd z = L * xi;
        const double quad = z.dot(W * z);
        const ProjectionResult res = projector.project(z);
        double x = quad - res.objective;
        if (x < 0) {
            if (x < -1e-9 * std::max(1.0, quad))
                throw ProjectionError("projection objective exceeds the squared norm of draw " + std::to_string(i));
            x = 0.0;
        }
        sample.draws[i] = x;
    });
    return sample;
}

std::optional<WeightEstimate> exact_weights(const Cone& cone, const ConeDims& dims) {
    const int halflines = cone.count(ConeFactor::Kind::halflines);
    const int psd = cone.psd_factor_count();
    WeightEstimate w;
    w.exact = true;
    if (psd == 0 && halflines == 0) {
        w.dfs = {dims.d1};
        w.weights = VectorXd::Ones(1);
    } else if (psd == 0 && halflines == 1) {
        w.dfs = {dims.d1, dims.d1 + 1};
        w.weights = VectorXd::Constant(2, 0.5);
    } else {
        return std::nullopt;
    }
    if (static_cast<int>(w.dfs.size()) != dims.n_weights) return std::nullopt;
    w.sd = VectorXd::Zero(static_cast<Eigen::Index>(w.dfs.size()));
    w.covariance = MatrixXd::Zero(w.sd.size(), w.sd.size());
    return w;
}

std::vector<double> weight_thresholds(const ChiBarSample& sample, int count) {
    if (count <= 0) return {};
    std::vector<double> positive;
    for (double x : sample.draws)
        if (x > 0) positive.push_back(x);
    if (positive.size() < static_cast<std::size_t>(count) + 1)
        throw EstimationError("too few positive draws to place the weight thresholds; increase M");
    std::sort(positive.begin(), positive.end());
    std::vector<double> out;
    const double n = static_cast<double>(positive.size());
    for (int j = 0; j < count; ++j) {
        const double level = count == 1 ? 0.5 : 0.15 + 0.7 * j / (count - 1);
        const double h = (n - 1.0) * level;
        const auto lo = static_cast<std::size_t>(std::floor(h));
        const std::size_t hi = std::min(lo + 1, positive.size() - 1);
        out.push_back(positive[lo] + (h - static_cast<double>(lo)) * (positive[hi] - positive[lo]));
    }
    return out;
}

namespace {

MatrixXd system_matrix(const ConeDims& dims, const std::vector<double>& thresholds) {
    const int n = dims.n_weights;
    MatrixXd A(n, n);
    for (int j = 0; j < n; ++j) {
        A(0, j) = 1.0;
        A(1, j) = j % 2 == 0 ? 1.0 : 0.0;
        for (int r = 2; r < n; ++r) A(r, j) = chi2_cdf(dims.d1 + j, thresholds[static_cast<std::size_t>(r - 2)]);
    }
    return A;
}

void check_dims(const ConeDims& dims) {
    if (dims.n_weights < 2) throw ValidationError("weight estimation needs at least two mixture components");
}

}  // namespace

WeightSystem weight_system(const ConeDims& dims, const std::vector<double>& thresholds, const VectorXd& cdf_values,
                           int M) {
    check_dims(dims);
    const int n = dims.n_weights;
    if (static_cast<int>(thresholds.size()) != n - 2 || cdf_values.size() != n - 2)
        throw ValidationError("weight system needs n_weights - 2 thresholds");
    WeightSystem sys;
    sys.thresholds = thresholds;
    sys.A = system_matrix(dims, thresholds);
    sys.b.resize(n);
    sys.b(0) = 1.0;
    sys.b(1) = 0.5;
    sys.b.tail(n - 2) = cdf_values;
    sys.b_covariance = MatrixXd::Zero(n, n);
    for (int j = 2; j < n; ++j)
        for (int k = 2; k < n; ++k) {
            const double joint = cdf_values(std::min(j, k) - 2);
            sys.b_covariance(j, k) = (joint - cdf_values(j - 2) * cdf_values(k - 2)) / M;
        }
    return sys;
}

WeightSystem weight_system(const ChiBarSample& sample, const ConeDims& dims) {
    check_dims(dims);
    const int n = dims.n_weights;
    if (sample.M < 100 * n) throw ValidationError("Monte Carlo sample too small: M must be at least 100 per weight");
    const auto thresholds = weight_thresholds(sample, n - 2);
    VectorXd cdf(n - 2);
    for (int j = 0; j < n - 2; ++j) {
        const double c = thresholds[static_cast<std::size_t>(j)];
        const auto below = std::count_if(sample.draws.begin(), sample.draws.end(), [c](double x) { return x <= c; });
        cdf(j) = static_cast<double>(below) / sample.M;
    }
    return weight_system(dims, thresholds, cdf, sample.M);
}

WeightEstimate solve_weights(const WeightSystem& sys, const ConeDims& dims) {
    const Eigen::JacobiSVD<MatrixXd> svd(sys.A);
    const VectorXd sv = svd.singularValues();
    const double cond = sv(sv.size() - 1) > 0 ? sv(0) / sv(sv.size() - 1) : INFINITY;
    if (!(cond <= 1e12))
        throw EstimationError("weight system is singular (condition number above 1e12); "
                              "different thresholds are needed");
    const Eigen::PartialPivLU<MatrixXd> lu(sys.A);
    const MatrixXd Ainv = lu.inverse();
    WeightEstimate w;
    w.exact = false;
    for (int j = 0; j < dims.n_weights; ++j) w.dfs.push_back(dims.d1 + j);
    w.weights = lu.solve(sys.b);
    w.covariance = Ainv * sys.b_covariance * Ainv.transpose();
    w.covariance = 0.5 * (w.covariance + w.covariance.transpose()).eval();
    w.sd = w.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
    w.thresholds = sys.thresholds;
    for (Eigen::Index j = 0; j < w.weights.size(); ++j)
        if (w.weights(j) < -0.02 || w.weights(j) > 1.02)
            w.warnings.push_back("estimated weight for df " + std::to_string(w.dfs[static_cast<std::size_t>(j)]) +
                                 " lies outside [0, 1]");
    return w;
}

WeightEstimate estimate_weights(const ChiBarSample& sample, const ConeDims& dims) {
    return solve_weights(weight_system(sample, dims), dims);
}

double pvalue_from_weights(const WeightEstimate& w, double lrt) {
    if (!(lrt >= 0)) throw ValidationError("LRT statistic must be non-negative");
    if (lrt == 0.0) return 1.0;  // P(X >= 0), the point mass included
    double p = 0.0;
    for (std::size_t j = 0; j < w.dfs.size(); ++j) p += w.weights(static_cast<Eigen::Index>(j)) * chi2_sf(w.dfs[j], lrt);
    return p;
}

double pvalue_from_sample(const ChiBarSample& sample, double lrt) {
    if (!(lrt >= 0)) throw ValidationError("LRT statistic must be non-negative");
    if (sample.draws.empty()) throw ValidationError("empty Monte Carlo sample");
    const auto above = std::count_if(sample.draws.begin(), sample.draws.end(), [lrt](double x) { return x >= lrt; });
    return static_cast<double>(above) / static_cast<double>(sample.draws.size());
}

std::pair<double, double> pvalue_bounds(double lrt, const ConeDims& dims) {
    if (!(lrt >= 0)) throw ValidationError("LRT statistic must be non-negative");
    if (lrt == 0.0) return {1.0, 1.0};
    if (dims.n_weights <= 1) {
        const double p = chi2_sf(dims.d1, lrt);
        return {p, p};
    }
    const double lower = 0.5 * (chi2_sf(dims.d1, lrt) + chi2_sf(dims.d1 + 1, lrt));
    const double upper = 0.5 * (chi2_sf(dims.df_max - 1, lrt) + chi2_sf(dims.df_max, lrt));
    return {lower, upper};
}

}  // namespace conetest
