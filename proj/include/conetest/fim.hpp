#pragma once

#include "conetest/data.hpp"
#include "conetest/lmm.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace conetest {

enum class FimKind { extracted, bootstrap, user };
std::string to_string(FimKind kind);

/// Fisher information (or, when is_inverse, its inverse) in the canonical
/// parameter order.
struct FimEstimate {
    Eigen::MatrixXd matrix;
    FimKind kind = FimKind::user;
    bool is_inverse = false;
    int B = 0;         // bootstrap replicates used
    int failures = 0;  // bootstrap refits dropped
    std::vector<std::string> theta_order;
};

/// Symmetrizes and floors eigenvalues at 1e-10 * largest. Throws
/// FimInputError for asymmetry above 1e-6 relative or eigenvalues below
/// -1e-6 * largest.
Eigen::MatrixXd repair(const Eigen::MatrixXd& m);

FimEstimate make_fim(Eigen::MatrixXd matrix, FimKind kind, bool is_inverse);

/// Covariance of B refits on data simulated from the fitted model.
FimEstimate bootstrap_fim(const FitResult& fit, const Dataset& ds, int B, std::uint64_t seed, int workers = 1);

/// Observed information at the fitted parameters.
FimEstimate extract_fim(const FitResult& fit, const Dataset& ds);

/// q rows of q whitespace-separated numbers.
FimEstimate load_fim(const std::filesystem::path& path, int q, bool is_inverse);
FimEstimate parse_fim(std::istream& in, int q, bool is_inverse, const std::string& source = "<stream>");

/// Sampling covariance V = I^-1.
Eigen::MatrixXd to_V(const FimEstimate& fim);

}  // namespace conetest
