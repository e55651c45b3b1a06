#include "conetest/fim.hpp"

#include "conetest/errors.hpp"
#include "conetest/parallel.hpp"
#include "conetest/rng.hpp"

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>

namespace conetest {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string to_string(FimKind kind) {
    switch (kind) {
        case FimKind::extracted: return "extracted";
        case FimKind::bootstrap: return "bootstrap";
        case FimKind::user: return "user";
    }
    return "user";
}

MatrixXd repair(const MatrixXd& m) {
    if (m.rows() != m.cols() || m.rows() == 0) throw FimInputError("information matrix must be square and non-empty");
    if (!m.allFinite()) throw FimInputError("information matrix has non-finite entries");
    const double scale = m.cwiseAbs().maxCoeff();
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-6 * scale)
        throw FimInputError("information matrix is not symmetric");
    const MatrixXd sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym);
    const VectorXd lam = es.eigenvalues();
    const double top = lam.maxCoeff();
    if (!(top > 0)) throw FimInputError("information matrix has no positive eigenvalue");
    if (lam.minCoeff() < -1e-6 * top) throw FimInputError("information matrix is indefinite beyond repair");
    const double floor = 1e-10 * top;
    if (lam.minCoeff() >= 0.5 * floor) return sym;
    const VectorXd fixed = lam.cwiseMax(floor);
    MatrixXd out = es.eigenvectors() * fixed.asDiagonal() * es.eigenvectors().transpose();
    return 0.5 * (out + out.transpose());
}

FimEstimate make_fim(MatrixXd matrix, FimKind kind, bool is_inverse) {
    FimEstimate f;
    f.matrix = repair(matrix);
    f.kind = kind;
    f.is_inverse = is_inverse;
    return f;
}

FimEstimate bootstrap_fim(const FitResult& fit, const Dataset& ds, int B, std::uint64_t seed, int workers) {
    if (!fit.converged) throw ValidationError("bootstrap information requires a converged fit");
    if (B < 50) throw ValidationError("bootstrap size B must be at least 50");
    const int q = fit.spec.q();
    std::vector<std::optional<VectorXd>> estimates(static_cast<std::size_t>(B));
    parallel_for(static_cast<std::size_t>(B), workers, [&](std::size_t b) {
        const std::uint64_t rep_seed = mix_seed(seed, b);
        const Dataset sim = simulate(fit.spec, fit.theta_hat, ds, rep_seed);
        FitOptions opts;
        opts.restarts = 0;
        opts.seed = rep_seed;
        try {
            const FitResult refit = fit_ml(fit.spec, sim, fit.theta_hat, opts);
            if (refit.converged) estimates[b] = refit.theta_hat.flatten();
        } catch (const NumericalError&) {
        }
    });

    int failures = 0;
    VectorXd mean = VectorXd::Zero(q);
    MatrixXd second = MatrixXd::Zero(q, q);
    for (const auto& e : estimates) {
        if (!e) {
            ++failures;
            continue;
        }
        mean += *e;
        second.noalias() += *e * e->transpose();
    }
    if (failures > B / 10)
        throw BootstrapError(std::to_string(failures) + " of " + std::to_string(B) + " bootstrap refits failed",
                             failures);
    const double used = B - failures;
    mean /= used;
    MatrixXd cov = second / used - mean * mean.transpose();
    FimEstimate f = make_fim(0.5 * (cov + cov.transpose()), FimKind::bootstrap, true);
    f.B = B - failures;
    f.failures = failures;
    f.theta_order = parameter_names(fit.fixed_columns, fit.random_columns, fit.spec.layout);
    return f;
}

FimEstimate extract_fim(const FitResult& fit, const Dataset& ds) {
    FimEstimate f;
    try {
        f = make_fim(hessian_fim(fit, ds), FimKind::extracted, false);
    } catch (const FimInputError& e) {
        throw EstimationError(std::string("observed information unusable: ") + e.what());
    }
    f.theta_order = parameter_names(fit.fixed_columns, fit.random_columns, fit.spec.layout);
    return f;
}

FimEstimate parse_fim(std::istream& in, int q, bool is_inverse, const std::string& source) {
    std::vector<std::vector<double>> rows;
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ss(line);
        std::vector<double> row;
        std::string token;
        while (ss >> token) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(token, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != token.size() || !std::isfinite(v))
                throw FimInputError(source + ":" + std::to_string(lineno) + ": '" + token + "' is not a number");
            row.push_back(v);
        }
        if (!row.empty()) rows.push_back(std::move(row));
    }
    if (static_cast<int>(rows.size()) != q)
        throw FimInputError(source + ": dimension mismatch, expected " + std::to_string(q) + " rows, found " +
                            std::to_string(rows.size()));
    MatrixXd m(q, q);
    for (int i = 0; i < q; ++i) {
        if (static_cast<int>(rows[static_cast<std::size_t>(i)].size()) != q)
            throw FimInputError(source + ": dimension mismatch in row " + std::to_string(i + 1) + ", expected " +
                                std::to_string(q) + " values");
        for (int j = 0; j < q; ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    return make_fim(m, FimKind::user, is_inverse);
}

FimEstimate load_fim(const std::filesystem::path& path, int q, bool is_inverse) {
    std::ifstream in(path);
    if (!in) throw FimInputError("cannot open information matrix file '" + path.string() + "'");
    return parse_fim(in, q, is_inverse, path.string());
}

MatrixXd to_V(const FimEstimate& fim) {
    if (fim.is_inverse) return fim.matrix;
    Eigen::LLT<MatrixXd> llt(fim.matrix);
    if (llt.info() != Eigen::Success) throw MetricError("information matrix is not positive definite");
    MatrixXd V = llt.solve(MatrixXd::Identity(fim.matrix.rows(), fim.matrix.cols()));
    return 0.5 * (V + V.transpose());
}

}  // namespace conetest
