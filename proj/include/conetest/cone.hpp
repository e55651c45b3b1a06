#pragma once

#include "conetest/structure.hpp"

#include <Eigen/Dense>

#include <vector>

namespace conetest {

/// One factor of a product cone, acting on the listed canonical coordinates.
struct ConeFactor {
    enum class Kind { zero, linear, halflines, psd };

    Kind kind = Kind::zero;
    std::vector<int> indices;
    /// psd only: matrix size s, `indices` hold the s(s+1)/2 half-vectorized
    /// entries (column-major lower triangle) and `rectangle` the paired free
    /// coordinates, which also belong to a linear factor.
    int size = 0;
    std::vector<int> rectangle;
};

/// Closed convex cone written as an ordered product of zero spaces, linear
/// spaces, half-lines and PSD cones whose coordinates partition {0..q-1}.
class Cone {
public:
    Cone() = default;
    Cone(int q, std::vector<ConeFactor> factors);

    static Cone from_index_sets(const IndexSets& sets);
    static Cone from_structure(const TestStructure& ts) { return from_index_sets(tested_index_sets(ts)); }

    static Cone whole_space(int q);
    static Cone origin(int q);
    static Cone orthant(int q);

    int q() const noexcept { return q_; }
    const std::vector<ConeFactor>& factors() const noexcept { return factors_; }
    std::vector<int> indices(ConeFactor::Kind kind) const;
    int count(ConeFactor::Kind kind) const;
    int psd_factor_count() const;
    /// True when the projection is a convex QP (no PSD factor).
    bool qp_solvable() const { return psd_factor_count() == 0; }

private:
    int q_ = 0;
    std::vector<ConeFactor> factors_;
};

/// Symmetric s x s matrix of a PSD factor read from a q-vector.
Eigen::MatrixXd psd_matrix(const ConeFactor& factor, const Eigen::VectorXd& v);

bool membership(const Cone& cone, const Eigen::VectorXd& v);

struct ProjectionResult {
    Eigen::VectorXd point;
    double objective = 0.0;  // (z - point)^T W (z - point)
    int active_dimension = 0;
};

/// Projection onto a cone in the metric W. The factorizations depending on W
/// are computed once, so repeated projections with the same metric are cheap.
/// Reentrant: project() may be called concurrently.
class Projector {
public:
    Projector(Cone cone, const Eigen::MatrixXd& W);

    const Cone& cone() const noexcept { return cone_; }
    const Eigen::MatrixXd& metric() const noexcept { return W_; }
    ProjectionResult project(const Eigen::VectorXd& z) const;

private:
    // Reduced problem after eliminating fixed and free coordinates:
    // minimize (u - t)^T R (u - t) over t in (half-lines x PSD factors).
    Eigen::VectorXd solve_reduced(const Eigen::VectorXd& u) const;
    Eigen::VectorXd solve_active_set(const Eigen::VectorXd& u) const;
    Eigen::VectorXd solve_factored(const Eigen::VectorXd& u) const;

    Cone cone_;
    Eigen::MatrixXd W_;
    std::vector<int> zero_;
    std::vector<int> free_;     // linear coordinates
    std::vector<int> bounded_;  // half-lines then PSD entries
    int halflines_ = 0;
    // Positions of each PSD factor's entries within bounded_, half-vec order.
    struct PsdBlock {
        int size;
        std::vector<int> positions;
    };
    std::vector<PsdBlock> psd_blocks_;

    Eigen::MatrixXd shift_;  // (|free|+|bounded|) x |zero|: W_SS^-1 W_SZ
    Eigen::MatrixXd back_;   // |free| x |bounded|: W_LL^-1 W_LC
    Eigen::MatrixXd R_;      // Schur complement on the bounded coordinates
};

ProjectionResult project(const Cone& cone, const Eigen::VectorXd& z, const Eigen::MatrixXd& W);

}  // namespace conetest
