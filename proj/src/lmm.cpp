#include "conetest/lmm.hpp"

#include "conetest/errors.hpp"
#include "conetest/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace conetest {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kMaxCondition = 1e12;

int tri(int r) { return r * (r + 1) / 2; }

}  // namespace

int CovarianceLayout::dimension() const noexcept { return std::accumulate(blocks.begin(), blocks.end(), 0); }

int CovarianceLayout::parameter_count() const noexcept {
    int count = 0;
    for (int r : blocks) count += tri(r);
    return count;
}

int CovarianceLayout::offset(std::size_t block) const {
    return std::accumulate(blocks.begin(), blocks.begin() + static_cast<std::ptrdiff_t>(block), 0);
}

CovarianceLayout CovarianceLayout::full(int p) { return p > 0 ? CovarianceLayout{{p}} : CovarianceLayout{}; }

CovarianceLayout CovarianceLayout::diagonal(int p) { return CovarianceLayout{std::vector<int>(static_cast<std::size_t>(p), 1)}; }

LmmSpec::LmmSpec(std::vector<Term> fixed, std::vector<Term> random, CovarianceLayout lay)
    : random_terms(std::move(random)), layout(std::move(lay)) {
    for (auto& t : fixed)
        if (t.is_intercept()) fixed_terms.push_back(t);
    for (auto& t : fixed)
        if (!t.is_intercept()) fixed_terms.push_back(std::move(t));
    validate();
}

void LmmSpec::validate() const {
    for (int r : layout.blocks)
        if (r <= 0) throw ValidationError("covariance blocks must have positive size");
    if (static_cast<int>(random_terms.size()) != layout.dimension())
        throw ValidationError("random terms (" + std::to_string(random_terms.size()) +
                              ") do not match covariance layout dimension (" + std::to_string(layout.dimension()) +
                              ")");
}

Eigen::MatrixXd ParamVector::gamma() const {
    int p = 0;
    for (const auto& g : gamma_blocks) p += static_cast<int>(g.rows());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(p, p);
    int off = 0;
    for (const auto& g : gamma_blocks) {
        out.block(off, off, g.rows(), g.cols()) = g;
        off += static_cast<int>(g.rows());
    }
    return out;
}

Eigen::VectorXd ParamVector::flatten() const {
    int size = static_cast<int>(beta.size()) + 1;
    for (const auto& g : gamma_blocks) size += tri(static_cast<int>(g.rows()));
    Eigen::VectorXd flat(size);
    int k = 0;
    for (Eigen::Index i = 0; i < beta.size(); ++i) flat(k++) = beta(i);
    for (const auto& g : gamma_blocks)
        for (Eigen::Index c = 0; c < g.cols(); ++c)
            for (Eigen::Index r = c; r < g.rows(); ++r) flat(k++) = g(r, c);
    flat(k) = sigma2;
    return flat;
}

ParamVector ParamVector::unflatten(const Eigen::VectorXd& flat, int b, const CovarianceLayout& layout) {
    if (flat.size() != b + layout.parameter_count() + 1)
        throw ValidationError("parameter vector has length " + std::to_string(flat.size()) + ", expected " +
                              std::to_string(b + layout.parameter_count() + 1));
    ParamVector theta;
    theta.beta = flat.head(b);
    int k = b;
    for (int r : layout.blocks) {
        Eigen::MatrixXd g(r, r);
        for (int c = 0; c < r; ++c)
            for (int row = c; row < r; ++row) {
                g(row, c) = flat(k);
                g(c, row) = flat(k);
                ++k;
            }
        theta.gamma_blocks.push_back(std::move(g));
    }
    theta.sigma2 = flat(k);
    return theta;
}

void ParamVector::validate(int b, const CovarianceLayout& layout, bool allow_zero_sigma2) const {
    if (beta.size() != b) throw ValidationError("beta has wrong dimension");
    if (gamma_blocks.size() != layout.blocks.size()) throw ValidationError("gamma block count mismatch");
    for (std::size_t k = 0; k < gamma_blocks.size(); ++k) {
        const auto& g = gamma_blocks[k];
        if (g.rows() != layout.blocks[k] || g.cols() != layout.blocks[k])
            throw ValidationError("gamma block " + std::to_string(k) + " has wrong size");
        if (!g.allFinite()) throw ValidationError("gamma block " + std::to_string(k) + " is not finite");
        const double scale = std::max(1.0, g.cwiseAbs().maxCoeff());
        if ((g - g.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
            throw ValidationError("gamma block " + std::to_string(k) + " is not symmetric");
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g);
        const double largest = eig.eigenvalues().cwiseAbs().maxCoeff();
        if (eig.eigenvalues().minCoeff() < -1e-10 * largest)
            throw ValidationError("gamma block " + std::to_string(k) + " is not positive semidefinite");
    }
    if (!std::isfinite(sigma2) || sigma2 < 0.0 || (!allow_zero_sigma2 && sigma2 == 0.0))
        throw ValidationError("residual variance must be positive");
}

std::vector<std::string> parameter_names(const std::vector<std::string>& fixed_columns,
                                         const std::vector<std::string>& random_columns,
                                         const CovarianceLayout& layout) {
    std::vector<std::string> names;
    for (const auto& f : fixed_columns) names.push_back("beta(" + f + ")");
    int off = 0;
    for (int r : layout.blocks) {
        for (int c = 0; c < r; ++c)
            for (int row = c; row < r; ++row) {
                const auto a = static_cast<std::size_t>(off + row);
                const auto bcol = static_cast<std::size_t>(off + c);
                const std::string na = a < random_columns.size() ? random_columns[a] : std::to_string(a + 1);
                const std::string nb = bcol < random_columns.size() ? random_columns[bcol] : std::to_string(bcol + 1);
                names.push_back("gamma(" + na + "," + nb + ")");
            }
        off += r;
    }
    names.emplace_back("sigma2");
    return names;
}

// ---------------------------------------------------------------------------
// LmmProblem
// ---------------------------------------------------------------------------

LmmProblem::LmmProblem(const LmmSpec& spec, const Dataset& ds) : spec_(spec) {
    spec_.validate();
    if (ds.size() == 0) throw ValidationError("dataset has no individuals");
    design_ = design_matrices(ds, spec_.fixed_terms, spec_.random_terms);
    b_ = static_cast<int>(design_.fixed_columns.size());
    p_ = static_cast<int>(design_.random_columns.size());
    if (b_ != spec_.b())
        throw ValidationError("each fixed term must produce exactly one design column; reference indicator "
                              "columns of multi-level factors individually");
    if (p_ != spec_.p()) throw ValidationError("random design columns do not match the covariance layout");

    std::map<std::vector<double>, int> group_index;
    stats_.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& X = design_.individuals[i].fixed;
        const auto& Z = design_.individuals[i].random;
        const auto& y = ds.individual(i).responses;
        IndividualStats st;
        st.J = static_cast<double>(y.size());
        st.yty = y.squaredNorm();
        st.XtX = X.transpose() * X;
        st.XtZ = X.transpose() * Z;
        st.Xty = X.transpose() * y;
        st.Zty = Z.transpose() * y;
        const Eigen::MatrixXd ZtZ = Z.transpose() * Z;
        std::vector<double> key(ZtZ.data(), ZtZ.data() + ZtZ.size());
        key.push_back(st.J);
        auto [it, inserted] = group_index.try_emplace(std::move(key), static_cast<int>(groups_.size()));
        if (inserted) {
            Group g;
            g.ZtZ = ZtZ;
            g.J = st.J;
            g.first_id = ds.individual(i).id;
            if (p_ > 0) {
                const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(ZtZ);
                g.sqrtZtZ = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                            eig.eigenvectors().transpose();
            } else {
                g.sqrtZtZ.resize(0, 0);
            }
            groups_.push_back(std::move(g));
        }
        st.group = it->second;
        total_rows_ += static_cast<std::size_t>(y.size());
        stats_.push_back(std::move(st));
    }
}

LmmProblem::GroupTerms LmmProblem::group_terms(const Group& g, const Eigen::MatrixXd& gamma, double sigma2) const {
    GroupTerms t;
    if (!(sigma2 > 0.0) || !std::isfinite(sigma2))
        throw EvaluationError("residual variance must be positive and finite", g.first_id);
    if (p_ == 0) {
        t.K.resize(0, 0);
        t.logdet_core = 0.0;
        return t;
    }
    const Eigen::MatrixXd core = sigma2 * Eigen::MatrixXd::Identity(p_, p_) + g.sqrtZtZ * gamma * g.sqrtZtZ;
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(core, Eigen::EigenvaluesOnly);
    const double lo = std::min(eig.eigenvalues().minCoeff(), sigma2);
    const double hi = std::max(eig.eigenvalues().maxCoeff(), sigma2);
    if (!(lo > 0.0) || hi / lo > kMaxCondition || !std::isfinite(hi))
        throw EvaluationError("marginal covariance of individual '" + g.first_id + "' is numerically singular",
                              g.first_id);
    t.logdet_core = eig.eigenvalues().array().log().sum();
    const Eigen::MatrixXd M = sigma2 * Eigen::MatrixXd::Identity(p_, p_) + gamma * g.ZtZ;
    t.K = M.partialPivLu().solve(gamma);
    t.K = 0.5 * (t.K + t.K.transpose()).eval();
    return t;
}

std::vector<LmmProblem::GroupTerms> LmmProblem::all_terms(const Eigen::MatrixXd& gamma, double sigma2) const {
    std::vector<GroupTerms> terms;
    terms.reserve(groups_.size());
    for (const auto& g : groups_) terms.push_back(group_terms(g, gamma, sigma2));
    return terms;
}

LmmProblem::Evaluation LmmProblem::evaluate_terms(const Eigen::VectorXd& beta, const std::vector<GroupTerms>& terms,
                                                  double sigma2, bool with_gradient) const {
    Evaluation ev;
    const double inv_s2 = 1.0 / sigma2;
    const double log_s2 = std::log(sigma2);
    if (with_gradient) {
        ev.grad_beta = Eigen::VectorXd::Zero(b_);
        ev.grad_gamma = Eigen::MatrixXd::Zero(p_, p_);
    }
    // Per-group accumulators for the gradient pieces that do not depend on r_i.
    std::vector<double> group_count(groups_.size(), 0.0);
    Eigen::VectorXd Ztr(p_), KZtr(p_), w(p_);
    Eigen::VectorXd Xtr(b_);
    double loglik = 0.0;
    double grad_s2 = 0.0;
    for (const auto& st : stats_) {
        const auto& g = groups_[static_cast<std::size_t>(st.group)];
        const auto& gt = terms[static_cast<std::size_t>(st.group)];
        Xtr.noalias() = st.Xty - st.XtX * beta;
        const double rtr = st.yty - 2.0 * beta.dot(st.Xty) + beta.dot(st.XtX * beta);
        double quad = rtr;
        if (p_ > 0) {
            Ztr.noalias() = st.Zty - st.XtZ.transpose() * beta;
            KZtr.noalias() = gt.K * Ztr;
            quad -= Ztr.dot(KZtr);
        }
        quad *= inv_s2;
        const double logdet = (st.J - p_) * log_s2 + gt.logdet_core;
        loglik += -0.5 * (st.J * kLog2Pi + logdet + quad);
        if (!with_gradient) continue;
        if (p_ > 0) {
            ev.grad_beta.noalias() += inv_s2 * (Xtr - st.XtZ * KZtr);
            w.noalias() = inv_s2 * (Ztr - g.ZtZ * KZtr);
            ev.grad_gamma.noalias() += 0.5 * w * w.transpose();
            const double rV2r =
                inv_s2 * inv_s2 * (rtr - 2.0 * Ztr.dot(KZtr) + KZtr.dot(g.ZtZ * KZtr));
            grad_s2 += 0.5 * rV2r;
        } else {
            ev.grad_beta.noalias() += inv_s2 * Xtr;
            grad_s2 += 0.5 * inv_s2 * inv_s2 * rtr;
        }
        group_count[static_cast<std::size_t>(st.group)] += 1.0;
    }
    if (with_gradient) {
        for (std::size_t k = 0; k < groups_.size(); ++k) {
            if (group_count[k] == 0.0) continue;
            const auto& g = groups_[k];
            const auto& gt = terms[k];
            double trace_vinv = g.J;
            if (p_ > 0) {
                const Eigen::MatrixXd ZtVinvZ = inv_s2 * (g.ZtZ - g.ZtZ * gt.K * g.ZtZ);
                ev.grad_gamma.noalias() -= 0.5 * group_count[k] * ZtVinvZ;
                trace_vinv -= (gt.K * g.ZtZ).trace();
            }
            grad_s2 -= 0.5 * group_count[k] * inv_s2 * trace_vinv;
        }
        ev.grad_sigma2 = grad_s2;
    }
    ev.loglik = loglik;
    return ev;
}

LmmProblem::Evaluation LmmProblem::evaluate(const Eigen::VectorXd& beta, const Eigen::MatrixXd& gamma, double sigma2,
                                            bool with_gradient) const {
    if (beta.size() != b_ || gamma.rows() != p_ || gamma.cols() != p_)
        throw ValidationError("parameter dimensions do not match the model");
    return evaluate_terms(beta, all_terms(gamma, sigma2), sigma2, with_gradient);
}

double LmmProblem::loglik(const ParamVector& theta) const {
    if (theta.gamma_blocks.size() != spec_.layout.blocks.size())
        throw ValidationError("gamma block count mismatch");
    return evaluate(theta.beta, theta.gamma(), theta.sigma2, false).loglik;
}

double LmmProblem::loglik_flat(const Eigen::VectorXd& flat) const {
    return loglik(ParamVector::unflatten(flat, b_, spec_.layout));
}

Eigen::VectorXd LmmProblem::gradient_flat(const Eigen::VectorXd& flat) const {
    const ParamVector theta = ParamVector::unflatten(flat, b_, spec_.layout);
    const Evaluation ev = evaluate(theta.beta, theta.gamma(), theta.sigma2, true);
    Eigen::VectorXd grad(flat.size());
    int k = 0;
    for (int i = 0; i < b_; ++i) grad(k++) = ev.grad_beta(i);
    int off = 0;
    for (int r : spec_.layout.blocks) {
        for (int c = 0; c < r; ++c)
            for (int row = c; row < r; ++row)
                grad(k++) = (row == c ? 1.0 : 2.0) * ev.grad_gamma(off + row, off + c);
        off += r;
    }
    grad(k) = ev.grad_sigma2;
    return grad;
}

Eigen::VectorXd LmmProblem::gls_terms(const std::vector<GroupTerms>& terms, double sigma2) const {
    Eigen::MatrixXd XtVX = Eigen::MatrixXd::Zero(b_, b_);
    Eigen::VectorXd XtVy = Eigen::VectorXd::Zero(b_);
    for (const auto& st : stats_) {
        const auto& gt = terms[static_cast<std::size_t>(st.group)];
        if (p_ > 0) {
            const Eigen::MatrixXd XtZK = st.XtZ * gt.K;
            XtVX.noalias() += st.XtX - XtZK * st.XtZ.transpose();
            XtVy.noalias() += st.Xty - XtZK * st.Zty;
        } else {
            XtVX += st.XtX;
            XtVy += st.Xty;
        }
    }
    (void)sigma2;  // cancels between the two sides
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(XtVX);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0))
        throw EvaluationError("fixed-effect design is rank deficient");
    return ldlt.solve(XtVy);
}

Eigen::VectorXd LmmProblem::gls_beta(const Eigen::MatrixXd& gamma, double sigma2) const {
    return gls_terms(all_terms(gamma, sigma2), sigma2);
}

int LmmProblem::unconstrained_size() const noexcept { return spec_.layout.parameter_count() + 1; }

Eigen::MatrixXd LmmProblem::gamma_from_factors(const Eigen::VectorXd& phi) const {
    Eigen::MatrixXd gamma = Eigen::MatrixXd::Zero(p_, p_);
    int k = 0;
    int off = 0;
    for (int r : spec_.layout.blocks) {
        Eigen::MatrixXd L = Eigen::MatrixXd::Zero(r, r);
        for (int c = 0; c < r; ++c)
            for (int row = c; row < r; ++row) L(row, c) = phi(k++);
        gamma.block(off, off, r, r).noalias() = L * L.transpose();
        off += r;
    }
    return gamma;
}

double LmmProblem::profiled(const Eigen::VectorXd& phi, Eigen::VectorXd* gradient) const {
    const Eigen::MatrixXd gamma = gamma_from_factors(phi);
    const double sigma2 = sigma2_from(phi);
    const auto terms = all_terms(gamma, sigma2);
    const Eigen::VectorXd beta = gls_terms(terms, sigma2);
    const Evaluation ev = evaluate_terms(beta, terms, sigma2, gradient != nullptr);
    if (gradient) {
        gradient->resize(phi.size());
        int k = 0;
        int off = 0;
        for (int r : spec_.layout.blocks) {
            Eigen::MatrixXd L = Eigen::MatrixXd::Zero(r, r);
            int kk = k;
            for (int c = 0; c < r; ++c)
                for (int row = c; row < r; ++row) L(row, c) = phi(kk++);
            const Eigen::MatrixXd D = 2.0 * ev.grad_gamma.block(off, off, r, r) * L;
            for (int c = 0; c < r; ++c)
                for (int row = c; row < r; ++row) (*gradient)(k++) = D(row, c);
            off += r;
        }
        (*gradient)(k) = sigma2 * ev.grad_sigma2;
    }
    return ev.loglik;
}

Eigen::VectorXd LmmProblem::factors_from(const std::vector<Eigen::MatrixXd>& blocks, double sigma2) const {
    Eigen::VectorXd phi(unconstrained_size());
    int k = 0;
    for (std::size_t bi = 0; bi < spec_.layout.blocks.size(); ++bi) {
        const int r = spec_.layout.blocks[bi];
        const Eigen::MatrixXd& g = blocks.at(bi);
        const double ridge = 1e-8 * (g.trace() / r + sigma2);
        const Eigen::LLT<Eigen::MatrixXd> llt(g + ridge * Eigen::MatrixXd::Identity(r, r));
        if (llt.info() != Eigen::Success) throw ValidationError("starting covariance block is not PSD");
        const Eigen::MatrixXd L = llt.matrixL();
        for (int c = 0; c < r; ++c)
            for (int row = c; row < r; ++row) phi(k++) = L(row, c);
    }
    phi(k) = std::log(sigma2);
    return phi;
}

std::pair<Eigen::VectorXd, double> LmmProblem::ols() const {
    Eigen::MatrixXd XtX = Eigen::MatrixXd::Zero(b_, b_);
    Eigen::VectorXd Xty = Eigen::VectorXd::Zero(b_);
    double yty = 0.0;
    for (const auto& st : stats_) {
        XtX += st.XtX;
        Xty += st.Xty;
        yty += st.yty;
    }
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(XtX);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0))
        throw EvaluationError("fixed-effect design is rank deficient");
    const Eigen::VectorXd beta = ldlt.solve(Xty);
    double rss = 0.0;
    for (const auto& st : stats_) rss += st.yty - 2.0 * beta.dot(st.Xty) + beta.dot(st.XtX * beta);
    return {beta, std::max(rss, 0.0) / static_cast<double>(total_rows_)};
}

double marginal_loglik(const LmmSpec& spec, const ParamVector& theta, const Dataset& ds) {
    const LmmProblem problem(spec, ds);
    theta.validate(problem.b(), spec.layout);
    return problem.loglik(theta);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

namespace {

struct BfgsRun {
    Eigen::VectorXd x;
    double value = -std::numeric_limits<double>::infinity();  // log-likelihood
    double gradient_norm = std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool converged = false;
    std::vector<double> trace;
};

// Maximizes problem.profiled by BFGS on the negated objective with an
// Armijo backtracking line search. Evaluation failures count as rejected
// trial points.
BfgsRun maximize(const LmmProblem& problem, Eigen::VectorXd x, const FitOptions& opts) {
    BfgsRun run;
    const auto n = x.size();
    Eigen::VectorXd grad(n);
    double f;
    try {
        f = -problem.profiled(x, &grad);
    } catch (const NumericalError&) {
        return run;
    }
    if (!std::isfinite(f) || !grad.allFinite()) return run;
    grad = -grad;
    run.trace.push_back(-f);
    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
    bool fresh = true;
    int stalls = 0;
    Eigen::VectorXd trial_grad(n);
    for (int iter = 0; iter < opts.max_iter; ++iter) {
        run.iterations = iter;
        const double gnorm = grad.lpNorm<Eigen::Infinity>();
        if (gnorm <= opts.tol * std::max(1.0, std::abs(f))) {
            run.converged = true;
            break;
        }
        Eigen::VectorXd dir = -H * grad;
        double slope = grad.dot(dir);
        if (!(slope < 0.0)) {
            H.setIdentity();
            fresh = true;
            dir = -grad;
            slope = grad.dot(dir);
        }
        // Cap the first trial so no coordinate moves by more than 2 units.
        double step = std::min(1.0, 2.0 / std::max(dir.lpNorm<Eigen::Infinity>(), 1e-300));
        bool accepted = false;
        Eigen::VectorXd trial;
        double trial_f = 0.0;
        for (int attempt = 0; attempt < 60; ++attempt) {
            trial = x + step * dir;
            try {
                trial_f = -problem.profiled(trial, &trial_grad);
                trial_grad = -trial_grad;
                if (std::isfinite(trial_f) && trial_grad.allFinite() && trial_f <= f + 1e-4 * step * slope) {
                    accepted = true;
                    break;
                }
            } catch (const NumericalError&) {
            }
            step *= 0.5;
        }
        if (!accepted) {
            if (!fresh) {
                H.setIdentity();
                fresh = true;
                continue;
            }
            break;
        }
        const Eigen::VectorXd s = trial - x;
        const Eigen::VectorXd y = trial_grad - grad;
        stalls = f - trial_f <= 1e-13 * std::max(1.0, std::abs(f)) ? stalls + 1 : 0;
        x = trial;
        f = trial_f;
        grad = trial_grad;
        run.trace.push_back(-f);
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (fresh) {
                H = (sy / y.squaredNorm()) * Eigen::MatrixXd::Identity(n, n);
                fresh = false;
            }
            const double rho = 1.0 / sy;
            const Eigen::VectorXd Hy = H * y;
            H += (rho * rho * y.dot(Hy) + rho) * s * s.transpose() - rho * (Hy * s.transpose() + s * Hy.transpose());
        }
        if (stalls >= 5) break;
    }
    run.x = x;
    run.value = -f;
    run.gradient_norm = grad.lpNorm<Eigen::Infinity>();
    if (!run.converged) run.converged = run.gradient_norm <= opts.tol * std::max(1.0, std::abs(f));
    return run;
}

// Damped Newton iterations from the end point of a BFGS run. The Hessian is
// taken by central differences of the analytic gradient and made positive
// definite by flipping and flooring its eigenvalues.
void newton_polish(const LmmProblem& problem, BfgsRun& run, const FitOptions& opts) {
    const auto n = run.x.size();
    Eigen::VectorXd x = run.x;
    Eigen::VectorXd grad(n), trial_grad(n), gp(n), gm(n);
    double f = -problem.profiled(x, &grad);
    grad = -grad;
    for (int iter = 0; iter < 50; ++iter) {
        if (grad.lpNorm<Eigen::Infinity>() <= opts.tol * std::max(1.0, std::abs(f))) {
            run.converged = true;
            break;
        }
        Eigen::MatrixXd H(n, n);
        try {
            for (Eigen::Index i = 0; i < n; ++i) {
                const double h = 1e-5 * std::max(1.0, std::abs(x(i)));
                Eigen::VectorXd xp = x, xm = x;
                xp(i) += h;
                xm(i) -= h;
                problem.profiled(xp, &gp);
                problem.profiled(xm, &gm);
                H.col(i) = -(gp - gm) / (2.0 * h);
            }
        } catch (const NumericalError&) {
            break;
        }
        H = 0.5 * (H + H.transpose());
        if (!H.allFinite()) break;
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
        Eigen::VectorXd lam = es.eigenvalues().cwiseAbs();
        const double floor = 1e-10 * std::max(lam.maxCoeff(), 1e-300);
        lam = lam.cwiseMax(floor);
        const Eigen::VectorXd dir =
            -(es.eigenvectors() * (es.eigenvectors().transpose() * grad).cwiseQuotient(lam));
        const double slope = grad.dot(dir);
        // A predicted gain at the level of rounding in f means x is optimal to
        // working precision even when the gradient test is not met.
        const bool newton_gain = -0.5 * slope <= 1e-12 * std::max(1.0, std::abs(f));
        double step = std::min(1.0, 2.0 / std::max(dir.lpNorm<Eigen::Infinity>(), 1e-300));
        bool accepted = newton_gain;
        for (int attempt = 0; attempt < 40 && !accepted; ++attempt) {
            const Eigen::VectorXd trial = x + step * dir;
            try {
                const double trial_f = -problem.profiled(trial, &trial_grad);
                if (std::isfinite(trial_f) && trial_grad.allFinite() && trial_f <= f + 1e-4 * step * slope) {
                    x = trial;
                    f = trial_f;
                    grad = -trial_grad;
                    run.trace.push_back(-f);
                    accepted = true;
                    break;
                }
            } catch (const NumericalError&) {
            }
            step *= 0.5;
        }
        if (!accepted) break;
        if (newton_gain) {
            run.converged = true;
            break;
        }
    }
    run.x = x;
    run.value = -f;
    run.gradient_norm = grad.lpNorm<Eigen::Infinity>();
    if (!run.converged) run.converged = run.gradient_norm <= opts.tol * std::max(1.0, std::abs(f));
}

Eigen::VectorXd perturb(const LmmProblem& problem, const Eigen::VectorXd& start, std::uint64_t seed, int restart) {
    NormalStream rng(seed, static_cast<std::uint64_t>(restart));
    Eigen::VectorXd x = start;
    int k = 0;
    for (int r : problem.spec().layout.blocks) {
        double diag_scale = 0.0;
        int kk = k;
        for (int c = 0; c < r; ++c)
            for (int row = c; row < r; ++row, ++kk)
                if (row == c) diag_scale = std::max(diag_scale, std::abs(start(kk)));
        for (int c = 0; c < r; ++c)
            for (int row = c; row < r; ++row, ++k) {
                if (row == c)
                    x(k) = start(k) * std::exp(0.5 * rng.normal());
                else
                    x(k) = start(k) + 0.3 * diag_scale * rng.normal();
            }
    }
    x(k) = start(k) + 0.5 * rng.normal();
    return x;
}

}  // namespace

FitResult fit_ml(const LmmSpec& spec, const Dataset& ds, const std::optional<ParamVector>& init,
                 const FitOptions& opts) {
    const LmmProblem problem(spec, ds);
    const auto [beta_ols, resid_var] = problem.ols();
    const double v = resid_var > 0.0 ? resid_var : 1.0;

    Eigen::VectorXd start;
    if (init) {
        init->validate(problem.b(), spec.layout);
        start = problem.factors_from(init->gamma_blocks, init->sigma2);
    } else {
        std::vector<Eigen::MatrixXd> blocks;
        for (int r : spec.layout.blocks) blocks.push_back(0.1 * v * Eigen::MatrixXd::Identity(r, r));
        start = problem.factors_from(blocks, 0.9 * v);
    }

    BfgsRun best;
    bool have_best = false;
    for (int run_index = 0; run_index <= std::max(0, opts.restarts); ++run_index) {
        const Eigen::VectorXd x0 = run_index == 0 ? start : perturb(problem, start, opts.seed, run_index);
        BfgsRun run = maximize(problem, x0, opts);
        if (run.x.size() == 0) continue;
        if (!run.converged) newton_polish(problem, run, opts);
        const bool better = !have_best || (run.converged && !best.converged) ||
                            (run.converged == best.converged && run.value > best.value);
        if (better) {
            best = std::move(run);
            have_best = true;
        }
        // Models without random effects are concave in log sigma^2.
        if (problem.p() == 0 && best.converged) break;
    }
    if (!have_best) throw EvaluationError("log-likelihood could not be evaluated at any starting point");

    FitResult fit;
    fit.spec = problem.spec();
    fit.n_individuals = problem.n();
    fit.iterations = best.iterations;
    fit.converged = best.converged;
    fit.gradient_norm = best.gradient_norm;
    fit.objective_trace = best.trace;
    fit.fixed_columns = problem.design().fixed_columns;
    fit.random_columns = problem.design().random_columns;

    const Eigen::MatrixXd gamma = problem.gamma_from_factors(best.x);
    const double sigma2 = problem.sigma2_from(best.x);
    ParamVector theta;
    theta.beta = problem.gls_beta(gamma, sigma2);
    theta.sigma2 = sigma2;
    int off = 0;
    for (int r : spec.layout.blocks) {
        Eigen::MatrixXd block = gamma.block(off, off, r, r);
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(block);
        if ((eig.eigenvalues().array() < 1e-8 * sigma2).any()) {
            Eigen::VectorXd lambda = eig.eigenvalues();
            for (Eigen::Index i = 0; i < lambda.size(); ++i)
                if (lambda(i) < 1e-8 * sigma2) lambda(i) = 0.0;
            block = eig.eigenvectors() * lambda.asDiagonal() * eig.eigenvectors().transpose();
            block = 0.5 * (block + block.transpose()).eval();
        }
        theta.gamma_blocks.push_back(std::move(block));
        off += r;
    }
    fit.theta_hat = std::move(theta);
    fit.loglik = problem.loglik(fit.theta_hat);
    return fit;
}

// ---------------------------------------------------------------------------
// Simulation and information
// ---------------------------------------------------------------------------

Dataset simulate(const LmmSpec& spec, const ParamVector& theta, const Dataset& design, std::uint64_t seed) {
    spec.validate();
    const Design dm = design_matrices(design, spec.fixed_terms, spec.random_terms);
    const auto b = static_cast<int>(dm.fixed_columns.size());
    const auto p = static_cast<int>(dm.random_columns.size());
    if (p != spec.p()) throw ValidationError("random design columns do not match the covariance layout");
    theta.validate(b, spec.layout, true);
    const Eigen::MatrixXd gamma = theta.gamma();
    Eigen::MatrixXd root = Eigen::MatrixXd::Zero(p, p);
    if (p > 0) {
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gamma);
        root = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    }
    const double sigma = std::sqrt(theta.sigma2);
    std::vector<Eigen::VectorXd> responses;
    responses.reserve(design.size());
    for (std::size_t i = 0; i < design.size(); ++i) {
        NormalStream rng(seed, i);
        const auto& X = dm.individuals[i].fixed;
        const auto& Z = dm.individuals[i].random;
        Eigen::VectorXd xi(p);
        for (int k = 0; k < p; ++k) xi(k) = rng.normal();
        Eigen::VectorXd y = X * theta.beta;
        if (p > 0) y.noalias() += Z * (root * xi);
        for (Eigen::Index j = 0; j < y.size(); ++j) y(j) += sigma * rng.normal();
        responses.push_back(std::move(y));
    }
    return design.with_responses(std::move(responses));
}

Eigen::MatrixXd finite_difference_hessian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& gradient,
                                          const Eigen::VectorXd& x, double* asymmetry) {
    const auto n = x.size();
    Eigen::MatrixXd H(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const double h = std::max(1e-5 * std::abs(x(j)), 1e-7);
        Eigen::VectorXd up = x, down = x;
        up(j) += h;
        down(j) -= h;
        H.col(j) = (gradient(up) - gradient(down)) / (up(j) - down(j));
    }
    if (asymmetry) *asymmetry = n > 0 ? (H - H.transpose()).cwiseAbs().maxCoeff() : 0.0;
    return 0.5 * (H + H.transpose());
}

Eigen::MatrixXd hessian_fim(const FitResult& fit, const Dataset& ds) {
    if (!fit.converged) throw ValidationError("observed information requires a converged fit");
    const LmmProblem problem(fit.spec, ds);
    const Eigen::VectorXd theta = fit.theta_hat.flatten();
    const Eigen::MatrixXd H = finite_difference_hessian(
        [&](const Eigen::VectorXd& v) { return problem.gradient_flat(v); }, theta);
    if (!H.allFinite()) throw EvaluationError("observed information has non-finite entries");
    return -H;
}

}  // namespace conetest
