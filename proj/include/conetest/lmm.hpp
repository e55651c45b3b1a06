#pragma once

#include "conetest/data.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace conetest {

struct TestStructure;

/// Block sizes of the block-diagonal random-effect covariance. Each block is
/// full: all within-block covariances are free parameters.
struct CovarianceLayout {
    std::vector<int> blocks;

    int dimension() const noexcept;
    int parameter_count() const noexcept;  // sum r_k (r_k + 1) / 2
    int offset(std::size_t block) const;   // first random-effect index of a block
    bool operator==(const CovarianceLayout&) const = default;

    static CovarianceLayout full(int p);
    static CovarianceLayout diagonal(int p);
};

struct LmmSpec {
    std::vector<Term> fixed_terms;   // intercept first once normalized
    std::vector<Term> random_terms;  // one per random effect, block order
    CovarianceLayout layout;

    LmmSpec() = default;
    LmmSpec(std::vector<Term> fixed, std::vector<Term> random, CovarianceLayout layout);

    int b() const noexcept { return static_cast<int>(fixed_terms.size()); }
    int p() const noexcept { return layout.dimension(); }
    int q() const noexcept { return b() + layout.parameter_count() + 1; }
    void validate() const;
};

/// theta = (beta, Gamma blocks, sigma^2). The canonical flattening is beta,
/// then per block the column-major lower triangle of Gamma_k, then sigma^2.
struct ParamVector {
    Eigen::VectorXd beta;
    std::vector<Eigen::MatrixXd> gamma_blocks;
    double sigma2 = 1.0;

    Eigen::MatrixXd gamma() const;  // assembled p x p
    Eigen::VectorXd flatten() const;
    static ParamVector unflatten(const Eigen::VectorXd& flat, int b, const CovarianceLayout& layout);

    /// Throws ValidationError unless dimensions match, blocks are symmetric
    /// PSD and sigma2 > 0 (or >= 0 when allow_zero_sigma2).
    void validate(int b, const CovarianceLayout& layout, bool allow_zero_sigma2 = false) const;
};

/// Human-readable names of the canonical coordinates, e.g. "gamma(age,age)".
std::vector<std::string> parameter_names(const std::vector<std::string>& fixed_columns,
                                         const std::vector<std::string>& random_columns,
                                         const CovarianceLayout& layout);

struct FitOptions {
    int max_iter = 500;
    double tol = 1e-8;
    int restarts = 3;
    std::uint64_t seed = 0;
};

struct FitResult {
    LmmSpec spec;
    ParamVector theta_hat;
    double loglik = 0.0;
    bool converged = false;
    int n_individuals = 0;
    int iterations = 0;
    double gradient_norm = 0.0;
    /// Accepted objective (log-likelihood) values of the winning run.
    std::vector<double> objective_trace;
    std::vector<std::string> fixed_columns;
    std::vector<std::string> random_columns;
};

/// Log-likelihood evaluator for one (spec, dataset) pair. Per-individual
/// sufficient statistics are precomputed and individuals sharing Z_i^T Z_i
/// share the p x p factorizations, so an evaluation costs O(n (b + p)^2).
class LmmProblem {
public:
    LmmProblem(const LmmSpec& spec, const Dataset& ds);

    const LmmSpec& spec() const noexcept { return spec_; }
    const Design& design() const noexcept { return design_; }
    int b() const noexcept { return b_; }
    int p() const noexcept { return p_; }
    int q() const noexcept { return spec_.q(); }
    int n() const noexcept { return static_cast<int>(stats_.size()); }
    std::size_t total_rows() const noexcept { return total_rows_; }

    struct Evaluation {
        double loglik = 0.0;
        Eigen::VectorXd grad_beta;
        Eigen::MatrixXd grad_gamma;  // d loglik = tr(grad_gamma dGamma), symmetric p x p
        double grad_sigma2 = 0.0;
    };

    /// Evaluates at (beta, Gamma, sigma2); Gamma need only keep every V_i
    /// positive definite. Throws EvaluationError when some V_i is singular
    /// or indefinite.
    Evaluation evaluate(const Eigen::VectorXd& beta, const Eigen::MatrixXd& gamma, double sigma2,
                        bool with_gradient) const;

    double loglik(const ParamVector& theta) const;
    double loglik_flat(const Eigen::VectorXd& flat) const;
    Eigen::VectorXd gradient_flat(const Eigen::VectorXd& flat) const;

    /// Generalized least squares beta for fixed (Gamma, sigma2).
    Eigen::VectorXd gls_beta(const Eigen::MatrixXd& gamma, double sigma2) const;

    // Unconstrained optimizer coordinates: lower-triangular factor entries
    // of each block (column-major) followed by log sigma^2; beta profiled.
    int unconstrained_size() const noexcept;
    Eigen::MatrixXd gamma_from_factors(const Eigen::VectorXd& phi) const;
    double sigma2_from(const Eigen::VectorXd& phi) const { return std::exp(phi(phi.size() - 1)); }
    /// Profiled log-likelihood and its gradient with respect to phi.
    double profiled(const Eigen::VectorXd& phi, Eigen::VectorXd* gradient) const;
    Eigen::VectorXd factors_from(const std::vector<Eigen::MatrixXd>& blocks, double sigma2) const;

    /// Ordinary least squares beta and residual variance.
    std::pair<Eigen::VectorXd, double> ols() const;

private:
    struct IndividualStats {
        double J;
        double yty;
        Eigen::MatrixXd XtX;
        Eigen::MatrixXd XtZ;
        Eigen::VectorXd Xty;
        Eigen::VectorXd Zty;
        int group;
    };
    struct Group {
        Eigen::MatrixXd ZtZ;
        Eigen::MatrixXd sqrtZtZ;
        double J;
        std::string first_id;
    };
    struct GroupTerms {
        Eigen::MatrixXd K;     // V^-1 = (I - Z K Z^T) / sigma2
        double logdet_core;    // log det(sigma2 I_p + A^1/2 Gamma A^1/2)
    };
    GroupTerms group_terms(const Group& g, const Eigen::MatrixXd& gamma, double sigma2) const;
    std::vector<GroupTerms> all_terms(const Eigen::MatrixXd& gamma, double sigma2) const;
    Evaluation evaluate_terms(const Eigen::VectorXd& beta, const std::vector<GroupTerms>& terms, double sigma2,
                              bool with_gradient) const;
    Eigen::VectorXd gls_terms(const std::vector<GroupTerms>& terms, double sigma2) const;

    LmmSpec spec_;
    Design design_;
    int b_ = 0;
    int p_ = 0;
    std::size_t total_rows_ = 0;
    std::vector<IndividualStats> stats_;
    std::vector<Group> groups_;
};

double marginal_loglik(const LmmSpec& spec, const ParamVector& theta, const Dataset& ds);

FitResult fit_ml(const LmmSpec& spec, const Dataset& ds, const std::optional<ParamVector>& init = std::nullopt,
                 const FitOptions& opts = {});

/// Null-hypothesis spec: tested fixed terms dropped, tested blocks removed,
/// tested trailing sub-blocks trimmed, blocks with tested covariances split.
LmmSpec constrain(const LmmSpec& spec, const TestStructure& null);

Dataset simulate(const LmmSpec& spec, const ParamVector& theta, const Dataset& design, std::uint64_t seed);

/// Hessian of a function from central differences of its gradient, column j
/// using step max(1e-5 |x_j|, 1e-7). `asymmetry` receives max |H - H^T|
/// before symmetrization.
Eigen::MatrixXd finite_difference_hessian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& gradient,
                                          const Eigen::VectorXd& x, double* asymmetry = nullptr);

/// Observed information (negative Hessian of the log-likelihood) at the
/// fitted parameters, in the canonical flattening.
Eigen::MatrixXd hessian_fim(const FitResult& fit, const Dataset& ds);

}  // namespace conetest
