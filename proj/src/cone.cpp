#include "conetest/cone.hpp"

#include "conetest/errors.hpp"
#include "conetest/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace conetest {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Kind = ConeFactor::Kind;

namespace {

MatrixXd take(const MatrixXd& m, const std::vector<int>& rows, const std::vector<int>& cols) {
    MatrixXd out(rows.size(), cols.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = m(rows[i], cols[j]);
    return out;
}

VectorXd take(const VectorXd& v, const std::vector<int>& idx) {
    VectorXd out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out(i) = v(idx[i]);
    return out;
}

double max_abs(const VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

// Lower triangle of an s x s matrix read from / written to half-vec order.
MatrixXd from_vech(const VectorXd& x, int offset, int s) {
    MatrixXd L = MatrixXd::Zero(s, s);
    int k = offset;
    for (int c = 0; c < s; ++c)
        for (int r = c; r < s; ++r) L(r, c) = x(k++);
    return L;
}

void to_vech(const MatrixXd& m, VectorXd& x, int offset) {
    const int s = static_cast<int>(m.rows());
    int k = offset;
    for (int c = 0; c < s; ++c)
        for (int r = c; r < s; ++r) x(k++) = m(r, c);
}

struct Minimum {
    VectorXd x;
    double f = std::numeric_limits<double>::infinity();
};

// Quasi-Newton minimization with Armijo backtracking.
template <class Objective>
Minimum bfgs_minimize(Objective&& objective, VectorXd x, int max_iter) {
    const int n = static_cast<int>(x.size());
    VectorXd g(n);
    double f = objective(x, g);
    if (!std::isfinite(f)) return {};
    MatrixXd H = MatrixXd::Identity(n, n);
    const double fscale = std::max(1.0, std::abs(f));
    const double gtol = 1e-10 * fscale;
    int stalled = 0;
    for (int it = 0; it < max_iter; ++it) {
        if (g.lpNorm<Eigen::Infinity>() <= gtol) break;
        VectorXd d = -H * g;
        double slope = g.dot(d);
        if (!(slope < 0)) {
            H.setIdentity();
            d = -g;
            slope = -g.squaredNorm();
        }
        double step = 1.0;
        VectorXd xn(n), gn(n);
        double fn = 0.0;
        bool accepted = false;
        for (int halving = 0; halving < 60; ++halving) {
            xn = x + step * d;
            fn = objective(xn, gn);
            if (std::isfinite(fn) && fn <= f + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
        const VectorXd s = xn - x;
        const VectorXd y = gn - g;
        const double sy = s.dot(y);
        const double fprev = f;
        x = xn;
        g = gn;
        f = fn;
        if (sy > 1e-14 * s.norm() * y.norm()) {
            const double rho = 1.0 / sy;
            const VectorXd Hy = H * y;
            H += (rho * rho * y.dot(Hy) + rho) * s * s.transpose() - rho * (Hy * s.transpose() + s * Hy.transpose());
        }
        stalled = fprev - f <= 1e-15 * fscale ? stalled + 1 : 0;
        if (stalled >= 3) break;
    }
    return {x, f};
}

// Primal active-set method for min (u - t)^T R (u - t) subject to t >= 0.
VectorXd nonnegative_qp(const MatrixXd& R, const VectorXd& u) {
    const int n = static_cast<int>(u.size());
    const VectorXd b = R * u;
    const double tol = 1e-13 * (1.0 + max_abs(b));
    VectorXd t = VectorXd::Zero(n);
    std::vector<char> in_free(static_cast<std::size_t>(n), 0);

    auto solve_free = [&](VectorXd& x) {
        std::vector<int> F;
        for (int i = 0; i < n; ++i)
            if (in_free[static_cast<std::size_t>(i)]) F.push_back(i);
        x = VectorXd::Zero(n);
        if (F.empty()) return;
        const VectorXd xf = take(R, F, F).llt().solve(take(b, F));
        for (std::size_t k = 0; k < F.size(); ++k) x(F[k]) = xf(static_cast<Eigen::Index>(k));
    };

    const int max_iter = 50 + 10 * n;
    for (int it = 0; it < max_iter; ++it) {
        VectorXd x;
        solve_free(x);
        bool feasible = true;
        for (int i = 0; i < n; ++i)
            if (in_free[static_cast<std::size_t>(i)] && x(i) <= 0.0) feasible = false;
        if (feasible) {
            t = x;
            const VectorXd g = R * t - b;
            int enter = -1;
            double most = -tol;
            for (int i = 0; i < n; ++i)
                if (!in_free[static_cast<std::size_t>(i)] && g(i) < most) {
                    most = g(i);
                    enter = i;
                }
            if (enter < 0) return t;
            in_free[static_cast<std::size_t>(enter)] = 1;
            continue;
        }
        // Step towards x until the first free coordinate reaches zero.
        double alpha = 1.0;
        int blocking = -1;
        for (int i = 0; i < n; ++i)
            if (in_free[static_cast<std::size_t>(i)] && x(i) <= 0.0) {
                const double a = t(i) / (t(i) - x(i));
                if (blocking < 0 || a < alpha) {
                    alpha = a;
                    blocking = i;
                }
            }
        t += alpha * (x - t);
        t(blocking) = 0.0;
        in_free[static_cast<std::size_t>(blocking)] = 0;
        for (int i = 0; i < n; ++i)
            if (in_free[static_cast<std::size_t>(i)] && t(i) <= 0.0) {
                t(i) = 0.0;
                in_free[static_cast<std::size_t>(i)] = 0;
            }
    }
    throw ProjectionError("active-set quadratic program did not terminate");
}

}  // namespace

// ---------------------------------------------------------------------------
// Cone
// ---------------------------------------------------------------------------

Cone::Cone(int q, std::vector<ConeFactor> factors) : q_(q), factors_(std::move(factors)) {
    if (q < 0) throw ValidationError("cone dimension must be non-negative");
    std::vector<int> seen(static_cast<std::size_t>(q), 0);
    std::vector<char> linear(static_cast<std::size_t>(q), 0);
    for (const auto& f : factors_) {
        if (f.kind == Kind::psd) {
            if (f.size < 1 || static_cast<int>(f.indices.size()) != f.size * (f.size + 1) / 2)
                throw ValidationError("PSD factor coordinate count does not match its size");
        }
        for (int i : f.indices) {
            if (i < 0 || i >= q) throw ValidationError("cone coordinate " + std::to_string(i) + " out of range");
            if (seen[static_cast<std::size_t>(i)]++) throw ValidationError("cone coordinate " + std::to_string(i) + " repeated");
            if (f.kind == Kind::linear) linear[static_cast<std::size_t>(i)] = 1;
        }
    }
    for (int i = 0; i < q; ++i)
        if (!seen[static_cast<std::size_t>(i)]) throw ValidationError("cone coordinate " + std::to_string(i) + " not covered");
    for (const auto& f : factors_)
        for (int i : f.rectangle)
            if (i < 0 || i >= q || !linear[static_cast<std::size_t>(i)])
                throw ValidationError("PSD rectangle coordinates must be linear coordinates");
}

Cone Cone::from_index_sets(const IndexSets& sets) {
    std::vector<ConeFactor> factors;
    if (!sets.zero_set.empty()) factors.push_back({Kind::zero, sets.zero_set, 0, {}});
    if (!sets.linear_set.empty()) factors.push_back({Kind::linear, sets.linear_set, 0, {}});
    if (!sets.halfline_set.empty()) factors.push_back({Kind::halflines, sets.halfline_set, 0, {}});
    for (const auto& psd : sets.psd) factors.push_back({Kind::psd, psd.indices, psd.size, psd.rectangle});
    return Cone(sets.q, std::move(factors));
}

namespace {
std::vector<int> iota_indices(int q) {
    std::vector<int> v(static_cast<std::size_t>(q));
    std::iota(v.begin(), v.end(), 0);
    return v;
}
}  // namespace

Cone Cone::whole_space(int q) { return Cone(q, {{Kind::linear, iota_indices(q), 0, {}}}); }
Cone Cone::origin(int q) { return Cone(q, {{Kind::zero, iota_indices(q), 0, {}}}); }
Cone Cone::orthant(int q) { return Cone(q, {{Kind::halflines, iota_indices(q), 0, {}}}); }

std::vector<int> Cone::indices(Kind kind) const {
    std::vector<int> out;
    for (const auto& f : factors_)
        if (f.kind == kind) out.insert(out.end(), f.indices.begin(), f.indices.end());
    return out;
}

int Cone::count(Kind kind) const { return static_cast<int>(indices(kind).size()); }

int Cone::psd_factor_count() const {
    return static_cast<int>(std::count_if(factors_.begin(), factors_.end(), [](const ConeFactor& f) {
        return f.kind == Kind::psd;
    }));
}

MatrixXd psd_matrix(const ConeFactor& factor, const VectorXd& v) {
    MatrixXd m(factor.size, factor.size);
    std::size_t k = 0;
    for (int c = 0; c < factor.size; ++c)
        for (int r = c; r < factor.size; ++r) {
            m(r, c) = v(factor.indices[k++]);
            m(c, r) = m(r, c);
        }
    return m;
}

bool membership(const Cone& cone, const VectorXd& v) {
    if (v.size() != cone.q()) throw ValidationError("membership: vector length differs from the cone dimension");
    if (!v.allFinite()) return false;
    const double tol = 1e-9 * (1.0 + max_abs(v));
    for (const auto& f : cone.factors()) {
        switch (f.kind) {
            case Kind::zero:
                for (int i : f.indices)
                    if (v(i) != 0.0) return false;
                break;
            case Kind::linear: break;
            case Kind::halflines:
                for (int i : f.indices)
                    if (v(i) < -tol) return false;
                break;
            case Kind::psd: {
                const MatrixXd m = psd_matrix(f, v);
                const double entry = m.cwiseAbs().maxCoeff();
                Eigen::SelfAdjointEigenSolver<MatrixXd> es(m, Eigen::EigenvaluesOnly);
                if (es.eigenvalues().minCoeff() < -1e-9 * (1.0 + entry)) return false;
                break;
            }
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Projector
// ---------------------------------------------------------------------------

Projector::Projector(Cone cone, const MatrixXd& W) : cone_(std::move(cone)), W_(W) {
    const int q = cone_.q();
    if (W.rows() != q || W.cols() != q) throw MetricError("metric dimension differs from the cone dimension");
    if (!W.allFinite()) throw MetricError("metric has non-finite entries");
    const double scale = W.cwiseAbs().maxCoeff();
    if ((W - W.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale) throw MetricError("metric is not symmetric");
    if (q > 0) {
        Eigen::LLT<MatrixXd> llt(W);
        if (llt.info() != Eigen::Success || !(scale > 0)) throw MetricError("metric is not positive definite");
    }

    zero_ = cone_.indices(Kind::zero);
    free_ = cone_.indices(Kind::linear);
    bounded_ = cone_.indices(Kind::halflines);
    halflines_ = static_cast<int>(bounded_.size());
    for (const auto& f : cone_.factors()) {
        if (f.kind != Kind::psd) continue;
        PsdBlock block{f.size, {}};
        for (int idx : f.indices) {
            block.positions.push_back(static_cast<int>(bounded_.size()));
            bounded_.push_back(idx);
        }
        psd_blocks_.push_back(std::move(block));
    }

    std::vector<int> active = free_;
    active.insert(active.end(), bounded_.begin(), bounded_.end());
    if (!active.empty()) {
        const MatrixXd Wss = take(W_, active, active);
        Eigen::LLT<MatrixXd> llt(Wss);
        if (llt.info() != Eigen::Success) throw MetricError("metric is not positive definite");
        shift_ = zero_.empty() ? MatrixXd(active.size(), 0) : MatrixXd(llt.solve(take(W_, active, zero_)));
    }
    const MatrixXd Wcc = take(W_, bounded_, bounded_);
    if (!free_.empty() && !bounded_.empty()) {
        Eigen::LLT<MatrixXd> llt(take(W_, free_, free_));
        back_ = llt.solve(take(W_, free_, bounded_));
        R_ = Wcc - take(W_, bounded_, free_) * back_;
        R_ = 0.5 * (R_ + R_.transpose()).eval();
    } else {
        back_ = MatrixXd::Zero(free_.size(), bounded_.size());
        R_ = Wcc;
    }
}

ProjectionResult Projector::project(const VectorXd& z) const {
    const int q = cone_.q();
    if (z.size() != q) throw ValidationError("projection: vector length differs from the cone dimension");
    if (!z.allFinite()) throw ProjectionError("projection: vector has non-finite entries");
    const int nf = static_cast<int>(free_.size());
    const int nc = static_cast<int>(bounded_.size());

    VectorXd u(nf + nc);
    for (int i = 0; i < nf; ++i) u(i) = z(free_[static_cast<std::size_t>(i)]);
    for (int i = 0; i < nc; ++i) u(nf + i) = z(bounded_[static_cast<std::size_t>(i)]);
    if (!zero_.empty() && u.size() > 0) u.noalias() += shift_ * take(z, zero_);

    const VectorXd uC = u.tail(nc);
    const VectorXd tC = nc > 0 ? solve_reduced(uC) : VectorXd();
    VectorXd tL = u.head(nf);
    if (nf > 0 && nc > 0) tL.noalias() += back_ * (uC - tC);

    ProjectionResult res;
    res.point = VectorXd::Zero(q);
    for (int i = 0; i < nf; ++i) res.point(free_[static_cast<std::size_t>(i)]) = tL(i);
    for (int i = 0; i < nc; ++i) res.point(bounded_[static_cast<std::size_t>(i)]) = tC(i);
    const VectorXd r = z - res.point;
    res.objective = r.dot(W_ * r);

    const double scale = std::max(max_abs(z), max_abs(res.point));
    const double cut = 1e-8 * scale;
    int dim = nf;
    for (int i = 0; i < halflines_; ++i)
        if (tC(i) > cut) ++dim;
    for (const auto& block : psd_blocks_) {
        VectorXd vech(block.positions.size());
        for (std::size_t k = 0; k < block.positions.size(); ++k) vech(k) = tC(block.positions[k]);
        MatrixXd m = from_vech(vech, 0, block.size);
        m = m.selfadjointView<Eigen::Lower>();
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(m, Eigen::EigenvaluesOnly);
        for (int k = 0; k < block.size; ++k)
            if (es.eigenvalues()(k) > cut) ++dim;
    }
    res.active_dimension = dim;
    return res;
}

VectorXd Projector::solve_reduced(const VectorXd& u) const {
    const double s = max_abs(u);
    if (s == 0.0) return VectorXd::Zero(u.size());
    const VectorXd unit = u / s;
    const VectorXd t = psd_blocks_.empty() ? solve_active_set(unit) : solve_factored(unit);
    return s * t;
}

VectorXd Projector::solve_active_set(const VectorXd& u) const { return nonnegative_qp(R_, u); }

// PSD factors as L L^T and half-lines as x^2, minimized by quasi-Newton from
// several starts.
VectorXd Projector::solve_factored(const VectorXd& u) const {
    const int n = static_cast<int>(u.size());
    auto assemble = [&](const VectorXd& x) {
        VectorXd t(n);
        for (int i = 0; i < halflines_; ++i) t(i) = x(i) * x(i);
        int off = halflines_;
        for (const auto& block : psd_blocks_) {
            const MatrixXd L = from_vech(x, off, block.size);
            const MatrixXd M = L * L.transpose();
            VectorXd vech(block.positions.size());
            to_vech(M, vech, 0);
            for (std::size_t k = 0; k < block.positions.size(); ++k) t(block.positions[k]) = vech(k);
            off += static_cast<int>(block.positions.size());
        }
        return t;
    };
    auto objective = [&](const VectorXd& x, VectorXd& grad) {
        const VectorXd t = assemble(x);
        const VectorXd r = u - t;
        const VectorXd Rr = R_ * r;
        const VectorXd gt = -2.0 * Rr;
        grad.resize(x.size());
        for (int i = 0; i < halflines_; ++i) grad(i) = 2.0 * x(i) * gt(i);
        int off = halflines_;
        for (const auto& block : psd_blocks_) {
            const int s = block.size;
            MatrixXd G(s, s);
            std::size_t k = 0;
            for (int c = 0; c < s; ++c)
                for (int rr = c; rr < s; ++rr) {
                    const double g = gt(block.positions[k++]);
                    if (rr == c) {
                        G(rr, c) = g;
                    } else {
                        G(rr, c) = 0.5 * g;
                        G(c, rr) = 0.5 * g;
                    }
                }
            const MatrixXd dL = 2.0 * G * from_vech(x, off, s);
            to_vech(dL, grad, off);
            off += static_cast<int>(block.positions.size());
        }
        return r.dot(Rr);
    };

    const int nx = n;
    // First start: PSD factors at zero and the half-lines solved exactly on
    // that face, so the best start is never worse than the origin.
    VectorXd plain = VectorXd::Zero(nx);
    if (halflines_ > 0) {
        const int h = halflines_;
        const MatrixXd Rhh = R_.topLeftCorner(h, h);
        const VectorXd uh = u.head(h) + Rhh.llt().solve(R_.topRightCorner(h, n - h) * u.tail(n - h));
        plain.head(h) = nonnegative_qp(Rhh, uh).cwiseSqrt();
    }
    VectorXd clipped = plain;
    for (int i = 0; i < halflines_; ++i) clipped(i) = std::sqrt(std::max(u(i), 0.0));
    int off = halflines_;
    for (const auto& block : psd_blocks_) {
        VectorXd vech(block.positions.size());
        for (std::size_t k = 0; k < block.positions.size(); ++k) vech(k) = u(block.positions[k]);
        MatrixXd m = from_vech(vech, 0, block.size);
        m = m.selfadjointView<Eigen::Lower>();
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
        const VectorXd lam = es.eigenvalues().cwiseMax(0.0);
        MatrixXd plus = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
        plus.diagonal().array() += 1e-10 * (1.0 + lam.maxCoeff());
        to_vech(MatrixXd(plus.llt().matrixL()), clipped, off);
        off += static_cast<int>(block.positions.size());
    }
    VectorXd perturbed = clipped;
    NormalStream noise(0x636f6e65ULL, 0);
    const double amp = 0.1 * std::max(1.0, max_abs(clipped));
    for (int i = 0; i < nx; ++i) perturbed(i) += amp * noise.normal();

    Minimum best;
    for (const VectorXd& start : {plain, clipped, perturbed}) {
        Minimum m = bfgs_minimize(objective, start, 2000);
        if (m.f < best.f) best = std::move(m);
    }
    if (!std::isfinite(best.f)) throw ProjectionError("cone projection failed from every starting point");
    return assemble(best.x);
}

ProjectionResult project(const Cone& cone, const VectorXd& z, const MatrixXd& W) {
    return Projector(cone, W).project(z);
}

}  // namespace conetest
