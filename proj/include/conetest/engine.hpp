#pragma once

#include "conetest/chibarsq.hpp"
#include "conetest/fim.hpp"
#include "conetest/lmm.hpp"
#include "conetest/structure.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace conetest {

/// Package-neutral record of an externally fitted model.
struct FitSummary {
    std::optional<double> loglik;
    std::optional<TestStructure> structure;  // may be omitted for the null model
    std::optional<Eigen::VectorXd> theta;
    std::optional<Eigen::MatrixXd> fim;
    bool fim_is_inverse = false;
    std::optional<double> lrt_override;
    std::string source;
};

FitSummary parse_fit_summary(const std::filesystem::path& path);
FitSummary parse_fit_summary_text(const std::string& text, const std::string& source = "<json>");

enum class PvalMode { bounds, approx, both };
std::string to_string(PvalMode mode);
PvalMode pval_mode_from(const std::string& text);

struct FimChoice {
    enum class Kind { extract, compute, file };
    Kind kind = Kind::extract;
    std::filesystem::path path;
    bool is_inverse = false;  // for files

    static FimChoice from(const std::string& text);
    std::string describe() const;
};

struct TestOptions {
    PvalMode pval = PvalMode::bounds;
    FimChoice fim;
    int M = 5000;
    int B = 1000;
    std::uint64_t seed = 0;
    int workers = 1;
};

struct PValues {
    std::optional<double> from_weights;
    std::optional<double> from_sample;
    double lower_bound = 1.0;
    double upper_bound = 1.0;
};

struct TestResult {
    double lrt = 0.0;
    TestStructure structure;
    ConeDims dims;
    std::optional<WeightEstimate> weights;
    PValues pvalues;
    std::vector<std::string> warnings;
    std::string null_description;
    std::string alternative_description;
    /// Set when Monte Carlo weights were estimated.
    std::optional<FimKind> fim_kind;
    std::optional<Eigen::MatrixXd> V;
    int M = 0;
    std::uint64_t seed = 0;
};

/// Variance-component LRT from two internally fitted, nested models.
TestResult var_comp_test(const FitResult& m1, const FitResult& m0, const Dataset& ds, const TestOptions& opts);
/// Same test from two fit summaries.
TestResult var_comp_test(const FitSummary& m1, const FitSummary& m0, const TestOptions& opts);

/// Distribution part of the test for a known structure and LRT value;
/// `V` is required only when Monte Carlo weights are needed.
TestResult test_from_statistic(double lrt, const TestStructure& ts, const std::optional<Eigen::MatrixXd>& V,
                               const TestOptions& opts);

struct CoverageConfig {
    Eigen::VectorXd beta = Eigen::Vector2d(5.0, 7.0);
    Eigen::MatrixXd gamma = (Eigen::Matrix2d() << 0.64, 0.4, 0.4, 1.0).finished();
    double sigma2 = 1.44;
    int n = 100;
    int timepoints = 20;
    int R = 200;
    int B = 100;
    std::vector<FimChoice::Kind> modes{FimChoice::Kind::compute, FimChoice::Kind::extract};
    std::uint64_t seed = 0;
    int workers = 1;
};

struct CoverageTable {
    std::vector<std::string> parameters;
    std::vector<std::string> modes;
    Eigen::VectorXd truth;
    Eigen::MatrixXd coverage;  // parameters x modes
    int R = 0;
    int B = 0;
    std::vector<int> failures;  // per mode
};

/// Design shared by every repetition: n individuals observed at
/// t_j = (j - 1) / (J - 1).
Dataset coverage_design(int n, int timepoints);
CoverageTable run_coverage_study(const CoverageConfig& config);

}  // namespace conetest
