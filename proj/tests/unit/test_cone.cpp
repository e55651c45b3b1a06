#include "oracles.hpp"

#include "conetest/cone.hpp"
#include "conetest/errors.hpp"
#include "conetest/structure.hpp"

#include <doctest.h>

using namespace conetest;
using Kind = ConeFactor::Kind;

namespace {

Cone zero_line_half() {
    return Cone(3, {{Kind::zero, {0}, 0, {}}, {Kind::linear, {1}, 0, {}}, {Kind::halflines, {2}, 0, {}}});
}

Cone psd2() { return Cone(3, {{Kind::psd, {0, 1, 2}, 2, {}}}); }

}  // namespace

TEST_CASE("points of the cone are fixed") {
    NormalStream rng(1, 0);
    const Eigen::MatrixXd W = testing::random_spd(3, rng);
    const Eigen::Vector3d z(0.0, -1.3, 0.7);
    const ProjectionResult r = project(zero_line_half(), z, W);
    CHECK((r.point - z).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(r.objective == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("negative part on a single half-line") {
    const ProjectionResult r = project(Cone::orthant(1), Eigen::VectorXd::Constant(1, -2.0), Eigen::MatrixXd::Identity(1, 1));
    CHECK(r.point(0) == 0.0);
    CHECK(r.objective == doctest::Approx(4.0));
    CHECK(r.active_dimension == 0);
}

TEST_CASE("zero x line x half-line agrees with a refined grid search") {
    NormalStream rng(7, 0);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::MatrixXd W = testing::random_spd(3, rng);
        const Eigen::VectorXd z = testing::random_vector(3, rng, 2.0);
        const ProjectionResult r = project(zero_line_half(), z, W);
        const auto f = [&](double x, double y) { return testing::w_norm2(z - Eigen::Vector3d(0, x, y), W); };
        const Eigen::Vector2d g = testing::refine_grid_2d(f, 0.0, 0.0, 8.0);
        CHECK(std::abs(r.point(1) - g(0)) <= 1e-6);
        CHECK(std::abs(r.point(2) - g(1)) <= 1e-6);
        CHECK(r.objective == doctest::Approx(f(g(0), g(1))).epsilon(1e-9).scale(1.0));
    }
}

TEST_CASE("projection satisfies the obliqueness conditions") {
    NormalStream rng(11, 0);
    const Cone cone(4, {{Kind::linear, {0}, 0, {}}, {Kind::halflines, {1, 2}, 0, {}}, {Kind::zero, {3}, 0, {}}});
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::MatrixXd W = testing::random_spd(4, rng);
        const Eigen::VectorXd z = testing::random_vector(4, rng, 1.5);
        const Eigen::VectorXd p = project(cone, z, W).point;
        const Eigen::VectorXd res = z - p;
        CHECK(std::abs(res.dot(W * p)) <= 1e-9 * (1 + z.squaredNorm()));
        for (int k = 0; k < 10; ++k) {
            Eigen::VectorXd c = testing::random_vector(4, rng);
            c(1) = std::abs(c(1));
            c(2) = std::abs(c(2));
            c(3) = 0.0;
            CHECK(res.dot(W * c) <= 1e-9 * (1 + z.norm() * c.norm()));
        }
        CHECK(membership(cone, p));
    }
}

TEST_CASE("PSD projection in the Frobenius metric clips eigenvalues") {
    const Eigen::Matrix3d W = Eigen::Vector3d(1.0, 2.0, 1.0).asDiagonal();
    NormalStream rng(3, 0);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::VectorXd z = testing::random_vector(3, rng, 2.0);
        Eigen::Matrix2d S;
        S << z(0), z(1), z(1), z(2);
        const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(S);
        const Eigen::Matrix2d clip =
            es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).asDiagonal() * es.eigenvectors().transpose();
        const Eigen::VectorXd p = project(psd2(), z, W).point;
        CHECK(std::abs(p(0) - clip(0, 0)) <= 1e-6);
        CHECK(std::abs(p(1) - clip(1, 0)) <= 1e-6);
        CHECK(std::abs(p(2) - clip(1, 1)) <= 1e-6);
    }
}

TEST_CASE("PSD projection with the sub-block structure keeps the rectangle free") {
    TestStructure ts;
    ts.b = 1;
    ts.layout = CovarianceLayout::full(3);
    ts.block_tests = {{BlockTestKind::subblock, 0, 2, {}}};
    const Cone cone = Cone::from_structure(ts);
    CHECK(cone.psd_factor_count() == 1);
    CHECK(!cone.qp_solvable());
    NormalStream rng(5, 0);
    const Eigen::MatrixXd W = testing::random_spd(cone.q(), rng);
    const Eigen::VectorXd z = testing::random_vector(cone.q(), rng);
    const ProjectionResult r = project(cone, z, W);
    CHECK(membership(cone, r.point));
    // Moreau: the residual is W-orthogonal to the projection
    CHECK(std::abs((z - r.point).dot(W * r.point)) <= 1e-6 * (1 + z.squaredNorm()));
    CHECK(r.objective <= testing::w_norm2(z, W) + 1e-12);
}

TEST_CASE("membership") {
    CHECK(membership(zero_line_half(), Eigen::Vector3d::Zero()));
    CHECK(membership(psd2(), Eigen::Vector3d::Zero()));
    CHECK_FALSE(membership(zero_line_half(), Eigen::Vector3d(0, 5, -1e-3)));
    CHECK_FALSE(membership(zero_line_half(), Eigen::Vector3d(1e-3, 5, 1)));
    // [[0.25, 0.75], [0.75, 0.25]] has eigenvalues 1 and -0.5
    CHECK_FALSE(membership(psd2(), Eigen::Vector3d(0.25, 0.75, 0.25)));
    CHECK(membership(psd2(), Eigen::Vector3d(1.0, 0.5, 1.0)));
}

TEST_CASE("whole space and origin") {
    NormalStream rng(9, 0);
    const Eigen::MatrixXd W = testing::random_spd(4, rng);
    const Eigen::VectorXd z = testing::random_vector(4, rng);
    const ProjectionResult all = project(Cone::whole_space(4), z, W);
    CHECK(all.point == z);
    CHECK(all.objective == 0.0);
    const ProjectionResult none = project(Cone::origin(4), z, W);
    CHECK(none.point.isZero());
    CHECK(none.objective == doctest::Approx(testing::w_norm2(z, W)));
}

TEST_CASE("bad metrics and partitions are rejected") {
    Eigen::Matrix3d W = Eigen::Matrix3d::Identity();
    W(0, 1) = 0.5;
    CHECK_THROWS_AS(Projector(zero_line_half(), W), MetricError);
    CHECK_THROWS_AS(Projector(zero_line_half(), Eigen::Matrix2d::Identity()), MetricError);
    CHECK_THROWS_AS(Projector(zero_line_half(), -Eigen::Matrix3d::Identity()), MetricError);
    CHECK_THROWS(Cone(3, {{Kind::zero, {0, 1}, 0, {}}}));
    CHECK_THROWS(Cone(2, {{Kind::zero, {0, 1}, 0, {}}, {Kind::linear, {1}, 0, {}}}));
}
