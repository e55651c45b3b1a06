// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include "../unit/common.hpp"
#include "../unit/oracles.hpp"

#include "conetest/chibarsq.hpp"
#include "conetest/cli.hpp"
#include "conetest/cone.hpp"
#include "conetest/engine.hpp"
#include "conetest/lmm.hpp"
#include "conetest/structure.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace conetest;
using Kind = ConeFactor::Kind;

namespace {

struct Criterion {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            notes.push_back("  failed: " + what);
        }
    }
    void info(const std::string& what) { notes.push_back("  info: " + what); }
};

std::string num(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

WeightEstimate given(std::vector<int> dfs, std::vector<double> w) {
    WeightEstimate e;
    e.dfs = std::move(dfs);
    e.weights = Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    e.sd = Eigen::VectorXd::Zero(e.weights.size());
    return e;
}

TestStructure structure(int b, std::vector<int> blocks, std::vector<BlockTest> tests, int residual = 1) {
    TestStructure ts;
    ts.b = b;
    ts.layout.blocks = std::move(blocks);
    ts.block_tests = std::move(tests);
    ts.residual_param_count = residual;
    return ts;
}

const BlockTest untested{};
const BlockTest full{BlockTestKind::full, 0, 0, {}};

LmmSpec orthodont_spec(const std::string& random, CovarianceLayout layout) {
    return LmmSpec(parse_terms("1 + Sex + age + Sex:age"), parse_terms(random), std::move(layout));
}

// ---------------------------------------------------------------------------

void ac1(Criterion& c) {
    const auto close = [&](const std::string& name, double got, double want) {
        c.check(rel(got, want) <= 1e-6, name + ": " + num(got) + " vs " + num(want) + " (relative error " +
                                            num(rel(got, want)) + ")");
    };
    const ConeDims d01{0, 0, 0, 1, 2};
    const ConeDims d012{0, 0, 0, 2, 3};
    close("case 1 p-value", pvalue_from_weights(given({1, 2}, {0.5, 0.5}), 0.8326426), 0.5104889);
    close("case 2 p-value", pvalue_from_weights(given({0, 1}, {0.5, 0.5}), 0.5304106), 0.2332171);
    const auto [lo3, hi3] = pvalue_bounds(50.13311, d012);
    close("case 3 lower bound", lo3, 7.18311e-13);
    close("case 3 upper bound", hi3, 7.215163e-12);
    close("case 3 p-value with nlme weights", pvalue_from_weights(given({0, 1, 2}, {0.3765372, 0.5, 0.1234628}), 50.13311),
          2.32255e-12);
    close("GLM p-value", pvalue_from_weights(given({0, 1}, {0.5, 0.5}), 14.00527), 9.114967e-05);
    const auto [lo_g, hi_g] = pvalue_bounds(14.00527, d01);
    close("GLM bounds", lo_g, 9.114967e-05);
    c.check(lo_g == hi_g, "GLM bounds collapse");
    const auto [lo_n, hi_n] = pvalue_bounds(2.519869, d012);
    close("NLM lower bound", lo_n, 0.05620995);
    close("NLM upper bound", hi_n, 0.1980462);
    close("NLM p-value", pvalue_from_weights(given({0, 1, 2}, {0.2490444, 0.5, 0.2509556}), 2.519869), 0.1273992);
}

void ac2(Criterion& c) {
    const auto dfs = [&](const std::string& name, const TestStructure& ts, int d1, int dfmax, int n) {
        const ConeDims d = cone_dims(ts);
        c.check(d.d1 == d1 && d.df_max == dfmax && d.n_weights == n,
                name + ": got (" + std::to_string(d.d1) + ".." + std::to_string(d.df_max) + ", " +
                    std::to_string(d.n_weights) + " components)");
    };
    dfs("worked example", structure(3, {3}, {{BlockTestKind::subblock, 0, 2, {}}}, 6), 2, 5, 4);
    dfs("case 1", structure(4, {2}, {{BlockTestKind::subblock, 0, 1, {}}}), 1, 2, 2);
    dfs("case 2", structure(4, {1, 1}, {untested, full}), 0, 1, 2);
    dfs("case 3", structure(4, {1, 1}, {full, full}), 0, 2, 3);
    dfs("GLM", structure(4, {1}, {full}), 0, 1, 2);
    dfs("NLM", structure(3, {1, 1, 1}, {untested, full, full}), 0, 2, 3);
    // the same structures inferred from model specs
    const TestStructure c1 = infer_test(orthodont_spec("1 + age", CovarianceLayout::full(2)),
                                        orthodont_spec("1", CovarianceLayout::full(1)));
    dfs("case 1 inferred", c1, 1, 2, 2);
    const TestStructure c3 = infer_test(orthodont_spec("1 + age", CovarianceLayout::diagonal(2)),
                                        orthodont_spec("0", CovarianceLayout{}));
    dfs("case 3 inferred", c3, 0, 2, 3);
}

void ac3(Criterion& c, double& seconds) {
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset ds = testing::orthodont();
    const FitResult full = fit_ml(orthodont_spec("1 + age", CovarianceLayout::full(2)), ds);
    const FitResult diag = fit_ml(orthodont_spec("1 + age", CovarianceLayout::diagonal(2)), ds);
    const FitResult intercept = fit_ml(orthodont_spec("1", CovarianceLayout::full(1)), ds);
    const FitResult none = fit_ml(orthodont_spec("0", CovarianceLayout{}), ds);
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const FitResult* f : {&full, &diag, &intercept, &none}) c.check(f->converged, "a fit did not converge");
    const double lrt[3] = {2 * (full.loglik - intercept.loglik), 2 * (diag.loglik - intercept.loglik),
                           2 * (diag.loglik - none.loglik)};
    const double want[3] = {0.8326426, 0.5304106, 50.13311};
    for (int k = 0; k < 3; ++k) {
        c.check(std::abs(lrt[k] - want[k]) <= 1e-2,
                "case " + std::to_string(k + 1) + " LRT " + num(lrt[k]) + " vs " + num(want[k]));
        c.info("case " + std::to_string(k + 1) + " LRT " + num(lrt[k]));
    }
    const auto [lo, hi] = pvalue_bounds(lrt[2], ConeDims{0, 0, 0, 2, 3});
    c.info("case 3 bounds from the fitted LRT: " + num(lo) + ", " + num(hi) + " (printed 7.18311e-13, 7.215163e-12)");
    c.check(seconds < 30.0, "fits took " + num(seconds) + " s");
}

void ac4(Criterion& c) {
    NormalStream rng(0x61633461, 0);
    // (a) one tested variance next to an untested block, random metrics
    const TestStructure ts = structure(4, {1, 1}, {untested, full});
    const Cone one = Cone::from_structure(ts);
    const ConeDims one_dims = cone_dims(ts);
    for (int k = 0; k < 5; ++k) {
        const Eigen::MatrixXd V = testing::random_spd(one.q(), rng);
        const ChiBarSample s = draw_sample(one, V, 5000, 100 + k);
        const WeightEstimate w = estimate_weights(s, one_dims);
        for (int j = 0; j < 2; ++j)
            c.check(std::abs(w.weights(j) - 0.5) <= 3 * w.sd(j) + 1e-12, "(a) metric " + std::to_string(k));
        // the empirical distribution function must match the equal mixture
        for (double x : {0.5, 1.5, 3.0}) {
            const double F = 0.5 * chi2_cdf(one_dims.d1, x) + 0.5 * chi2_cdf(one_dims.d1 + 1, x);
            const double hits = double(std::count_if(s.draws.begin(), s.draws.end(), [x](double d) { return d <= x; }));
            const double gap = std::abs(hits / 5000 - F);
            c.check(gap <= 3 * std::sqrt(F * (1 - F) / 5000),
                    "(a) metric " + std::to_string(k) + " distribution at " + num(x) + " off by " + num(gap));
        }
    }
    // (b) two independent half-lines
    const ChiBarSample s2 = draw_sample(Cone::orthant(2), Eigen::MatrixXd::Identity(2, 2), 5000, 7);
    const WeightEstimate w2 = estimate_weights(s2, ConeDims{2, 0, 0, 2, 3});
    const double truth[3] = {0.25, 0.5, 0.25};
    for (int j = 0; j < 3; ++j)
        c.check(std::abs(w2.weights(j) - truth[j]) <= 3 * w2.sd(j),
                "(b) weight " + std::to_string(j) + " = " + num(w2.weights(j)) + " sd " + num(w2.sd(j)));
    c.info("(b) weights " + num(w2.weights(0)) + " " + num(w2.weights(1)) + " " + num(w2.weights(2)));
    // (c) full quadratic form: Kolmogorov-Smirnov against chi-square(q) at 1%
    const int q = 4, M = 5000;
    ChiBarSample s3 = draw_sample(Cone::whole_space(q), testing::random_spd(q, rng), M, 9);
    std::sort(s3.draws.begin(), s3.draws.end());
    double D = 0.0;
    for (int i = 0; i < M; ++i) {
        const double F = chi2_cdf(q, s3.draws[static_cast<std::size_t>(i)]);
        D = std::max({D, F - double(i) / M, double(i + 1) / M - F});
    }
    c.check(D < 1.628 / std::sqrt(double(M)), "(c) KS statistic " + num(D));
    c.info("(c) KS statistic " + num(D) + " against critical " + num(1.628 / std::sqrt(double(M))));
}

Cone random_cone(int q, NormalStream& rng, bool allow_psd) {
    std::vector<int> idx(static_cast<std::size_t>(q));
    for (int i = 0; i < q; ++i) idx[static_cast<std::size_t>(i)] = i;
    // shuffle by sorting on random keys
    std::vector<std::pair<double, int>> keyed;
    for (int i : idx) keyed.emplace_back(rng.uniform(), i);
    std::sort(keyed.begin(), keyed.end());
    for (int i = 0; i < q; ++i) idx[static_cast<std::size_t>(i)] = keyed[static_cast<std::size_t>(i)].second;

    std::vector<ConeFactor> factors;
    std::size_t pos = 0;
    if (allow_psd && q >= 3 && rng.uniform() < 0.5) {
        factors.push_back({Kind::psd, {idx[0], idx[1], idx[2]}, 2, {}});
        pos = 3;
    }
    std::vector<int> zero, lin, half;
    for (; pos < idx.size(); ++pos) {
        const double u = rng.uniform();
        (u < 0.25 ? zero : u < 0.5 ? lin : half).push_back(idx[pos]);
    }
    if (!zero.empty()) factors.push_back({Kind::zero, zero, 0, {}});
    if (!lin.empty()) factors.push_back({Kind::linear, lin, 0, {}});
    if (!half.empty()) factors.push_back({Kind::halflines, half, 0, {}});
    return Cone(q, factors);
}

Eigen::VectorXd random_cone_point(const Cone& cone, NormalStream& rng) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(cone.q());
    for (const auto& f : cone.factors()) {
        if (f.kind == Kind::linear)
            for (int i : f.indices) v(i) = rng.normal();
        if (f.kind == Kind::halflines)
            for (int i : f.indices) v(i) = std::abs(rng.normal());
        if (f.kind == Kind::psd) {
            const double a = rng.normal(), b = rng.normal(), d = rng.normal();
            // L L^T with L = [[a, 0], [b, d]]
            v(f.indices[0]) = a * a;
            v(f.indices[1]) = a * b;
            v(f.indices[2]) = b * b + d * d;
        }
    }
    return v;
}

void ac5(Criterion& c, double& seconds) {
    const auto t0 = std::chrono::steady_clock::now();
    NormalStream rng(0x61633561, 0);
    int qp_instances = 0, psd_instances = 0;
    double worst_oracle = 0, worst_orth = 0, worst_dual = 0, worst_homog = 0, worst_contract = 0;
    for (int inst = 0; inst < 500; ++inst) {
        const int q = 1 + static_cast<int>(rng.uniform() * 6);
        const Cone cone = random_cone(q, rng, true);
        const Eigen::MatrixXd W = testing::random_spd(q, rng);
        const Projector proj(cone, W);
        const Eigen::VectorXd z = testing::random_vector(q, rng, 2.0);
        const ProjectionResult r = proj.project(z);
        const Eigen::VectorXd p = r.point;
        const double scale = 1.0 + testing::w_norm2(z, W);
        const std::string id = "instance " + std::to_string(inst);

        if (!membership(cone, p)) c.check(false, id + ": projection outside the cone");
        const Eigen::VectorXd res = z - p;
        worst_orth = std::max(worst_orth, std::abs(res.dot(W * p)) / scale);
        for (int k = 0; k < 5; ++k) {
            const Eigen::VectorXd cp = random_cone_point(cone, rng);
            worst_dual = std::max(worst_dual, res.dot(W * cp) / (scale * (1.0 + cp.norm())));
        }
        const double alpha = 0.1 + 5 * rng.uniform();
        worst_homog = std::max(worst_homog, (proj.project(alpha * z).point - alpha * p).cwiseAbs().maxCoeff() /
                                                (alpha * (1.0 + p.cwiseAbs().maxCoeff())));
        const Eigen::VectorXd z2 = testing::random_vector(q, rng, 2.0);
        const Eigen::VectorXd p2 = proj.project(z2).point;
        const double lhs = std::sqrt(testing::w_norm2(p - p2, W)), rhs = std::sqrt(testing::w_norm2(z - z2, W));
        worst_contract = std::max(worst_contract, (lhs - rhs) / (1.0 + rhs));
        c.check(std::abs(r.objective - testing::w_norm2(res, W)) <= 1e-9 * scale, id + ": objective mismatch");

        if (cone.qp_solvable()) {
            ++qp_instances;
            const Eigen::VectorXd oracle = testing::face_enumeration_projection(cone, z, W);
            worst_oracle = std::max(worst_oracle, (oracle - p).cwiseAbs().maxCoeff());
        } else {
            ++psd_instances;
        }
    }
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.check(worst_oracle <= 1e-6, "oracle disagreement " + num(worst_oracle));
    c.check(worst_orth <= 1e-7, "residual not orthogonal to the projection: " + num(worst_orth));
    c.check(worst_dual <= 1e-7, "residual not in the polar cone: " + num(worst_dual));
    c.check(worst_homog <= 1e-6, "homogeneity defect " + num(worst_homog));
    c.check(worst_contract <= 1e-9, "expansion " + num(worst_contract));
    c.check(seconds < 60.0, "took " + num(seconds) + " s");
    c.info(std::to_string(qp_instances) + " QP and " + std::to_string(psd_instances) +
           " PSD instances; worst oracle gap " + num(worst_oracle) + ", orthogonality " + num(worst_orth) +
           ", polar " + num(worst_dual) + ", homogeneity " + num(worst_homog));
}

void ac6(Criterion& c, double& seconds) {
    const auto t0 = std::chrono::steady_clock::now();
    CoverageConfig cfg;
    cfg.R = 200;
    cfg.B = 100;
    cfg.seed = 2018;
    const CoverageTable t = run_coverage_study(cfg);
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto col = std::find(t.modes.begin(), t.modes.end(), "bootstrap") - t.modes.begin();
    for (std::size_t i = 0; i < t.parameters.size(); ++i) {
        const double cov = t.coverage(static_cast<Eigen::Index>(i), col);
        c.check(cov >= 0.89 && cov <= 0.99, t.parameters[i] + " coverage " + num(cov));
        c.info(t.parameters[i] + ": bootstrap " + num(cov) + ", extracted " +
               num(t.coverage(static_cast<Eigen::Index>(i), 1 - col)));
    }
    c.check(seconds < 600.0, "took " + num(seconds) + " s");
}

void ac7(Criterion& c) {
    const auto run = [](std::vector<std::string> args) {
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return std::make_pair(code, out.str());
    };
    const std::string case3 = testing::source_path("configs/orthodont_case3.ini").string();
    const std::vector<std::string> base{"test", "--config", case3, "--pval", "both", "--fim", "compute",
                                        "--B", "200", "--seed", "7", "--format", "json"};
    auto with_workers = [&](const std::string& w) {
        auto a = base;
        a.insert(a.end(), {"--workers", w});
        return run(a);
    };
    const auto a = with_workers("1"), b = with_workers("1"), d = with_workers("4");
    c.check(a.first == 0 && b.first == 0 && d.first == 0, "test runs exited with failure");
    c.check(a.second == b.second, "repeated test runs differ");
    c.check(a.second == d.second, "test report differs between 1 and 4 workers");

    const std::vector<std::string> cov{"coverage", "--R", "10", "--B", "50", "--n", "40", "--seed", "3", "--format", "json"};
    auto cov1 = cov, cov4 = cov;
    cov4.insert(cov4.end(), {"--workers", "4"});
    const auto c1 = run(cov1), c1b = run(cov1), c4 = run(cov4);
    c.check(c1.first == 0 && c4.first == 0, "coverage runs exited with failure");
    c.check(c1.second == c1b.second && c1.second == c4.second, "coverage report differs between runs");
}

}  // namespace

int main() {
    struct Entry {
        const char* name;
        std::function<void(Criterion&, double&)> body;
    };
    const std::vector<Entry> entries{
        {"AC1 distribution golden values", [](Criterion& c, double&) { ac1(c); }},
        {"AC2 cone dimensions", [](Criterion& c, double&) { ac2(c); }},
        {"AC3 orthodont LMM fits", ac3},
        {"AC4 Monte Carlo weights", [](Criterion& c, double&) { ac4(c); }},
        {"AC5 projection properties", ac5},
        {"AC6 bootstrap coverage", ac6},
        {"AC7 determinism", [](Criterion& c, double&) { ac7(c); }},
    };
    bool all = true;
    for (const auto& e : entries) {
        Criterion c;
        double inner = -1;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            e.body(c, inner);
        } catch (const std::exception& ex) {
            c.check(false, std::string("exception: ") + ex.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %s (%.2f s)\n", c.pass ? "PASS" : "FAIL", e.name, secs);
        for (const auto& n : c.notes) std::printf("%s\n", n.c_str());
        std::fflush(stdout);
        all = all && c.pass;
    }
    return all ? 0 : 1;
}
