#pragma once

// Slow reference computations used by the unit and acceptance tests.

#include "conetest/cone.hpp"
#include "conetest/rng.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <vector>

namespace testing {

inline double w_norm2(const Eigen::VectorXd& v, const Eigen::MatrixXd& W) { return v.dot(W * v); }

inline Eigen::MatrixXd random_spd(int q, conetest::NormalStream& rng, double ridge = 0.3) {
    Eigen::MatrixXd A(q, q);
    for (int i = 0; i < q; ++i)
        for (int j = 0; j < q; ++j) A(i, j) = rng.normal();
    return A * A.transpose() / q + ridge * Eigen::MatrixXd::Identity(q, q);
}

inline Eigen::VectorXd random_vector(int q, conetest::NormalStream& rng, double scale = 1.0) {
    Eigen::VectorXd v(q);
    for (int i = 0; i < q; ++i) v(i) = scale * rng.normal();
    return v;
}

// Exact minimum of (z - t)^T W (z - t) over a cone made of zero, linear and
// half-line coordinates, by enumerating every face: each subset of
// half-lines is pinned at zero and the rest solved without constraints.
inline Eigen::VectorXd face_enumeration_projection(const conetest::Cone& cone, const Eigen::VectorXd& z,
                                                   const Eigen::MatrixXd& W) {
    using conetest::ConeFactor;
    const std::vector<int> lin = cone.indices(ConeFactor::Kind::linear);
    const std::vector<int> half = cone.indices(ConeFactor::Kind::halflines);
    const int h = static_cast<int>(half.size());
    double best = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_t = Eigen::VectorXd::Zero(z.size());
    for (unsigned mask = 0; mask < (1u << h); ++mask) {
        std::vector<int> free = lin;
        for (int k = 0; k < h; ++k)
            if (mask & (1u << k)) free.push_back(half[k]);
        Eigen::VectorXd t = Eigen::VectorXd::Zero(z.size());
        if (!free.empty()) {
            const auto m = static_cast<Eigen::Index>(free.size());
            Eigen::MatrixXd Wff(m, m);
            Eigen::VectorXd rhs(m);
            for (Eigen::Index i = 0; i < m; ++i) {
                rhs(i) = W.row(free[i]).dot(z);
                for (Eigen::Index j = 0; j < m; ++j) Wff(i, j) = W(free[i], free[j]);
            }
            const Eigen::VectorXd sol = Wff.ldlt().solve(rhs);
            for (Eigen::Index i = 0; i < m; ++i) t(free[i]) = sol(i);
        }
        bool feasible = true;
        for (int k = 0; k < h; ++k) feasible = feasible && t(half[k]) >= -1e-12;
        if (!feasible) continue;
        const double obj = w_norm2(z - t, W);
        if (obj < best) {
            best = obj;
            best_t = t;
        }
    }
    return best_t;
}

// Grid search with successive refinement for a two-dimensional convex
// objective over (x free, y >= 0).
template <class F>
Eigen::Vector2d refine_grid_2d(F&& f, double x0, double y0, double span, int levels = 40) {
    double bx = x0, by = std::max(0.0, y0);
    for (int level = 0; level < levels; ++level) {
        double best = f(bx, by);
        double nx = bx, ny = by;
        for (int i = -10; i <= 10; ++i)
            for (int j = -10; j <= 10; ++j) {
                const double x = bx + span * i / 10.0;
                const double y = std::max(0.0, by + span * j / 10.0);
                const double v = f(x, y);
                if (v < best) {
                    best = v;
                    nx = x;
                    ny = y;
                }
            }
        bx = nx;
        by = ny;
        span *= 0.5;
    }
    return {bx, by};
}

}  // namespace testing
