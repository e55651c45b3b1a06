#pragma once

#include "conetest/lmm.hpp"

#include <string>
#include <utility>
#include <vector>

namespace conetest {

enum class BlockTestKind { untested, covariances_only, full, subblock };

std::string to_string(BlockTestKind kind);
BlockTestKind block_test_kind_from(const std::string& text);

/// What the null hypothesis fixes inside one covariance block.
///  - covariances_only: t covariances zeroed, variances untested
///  - full: the whole block is zero
///  - subblock: the trailing s x s sub-block and its cross covariances are zero
struct BlockTest {
    BlockTestKind kind = BlockTestKind::untested;
    int t = 0;
    int s = 0;
    /// Tested covariances as (row, col) within the block, row > col. When
    /// empty for covariances_only, the first t off-diagonal entries of the
    /// column-major lower triangle are used.
    std::vector<std::pair<int, int>> pairs;

    bool operator==(const BlockTest&) const = default;
};

struct TestStructure {
    int b = 0;
    std::vector<int> tested_fixed;
    CovarianceLayout layout;
    std::vector<BlockTest> block_tests;
    int residual_param_count = 1;

    // Optional labels used in reports.
    std::vector<std::string> fixed_names;
    std::vector<std::string> random_names;

    int r_f() const noexcept { return static_cast<int>(tested_fixed.size()); }
    int q() const noexcept { return b + layout.parameter_count() + residual_param_count; }
    /// Resolved tested covariance pairs of a covariances_only block.
    std::vector<std::pair<int, int>> tested_pairs(std::size_t block) const;
    bool tests_anything() const noexcept;
    void validate() const;

    bool same_test(const TestStructure& other) const;
};

struct ConeDims {
    int q = 0;
    int a = 0;
    int d1 = 0;
    int df_max = 0;
    int n_weights = 0;

    bool operator==(const ConeDims&) const = default;
};

ConeDims cone_dims(const TestStructure& ts);

/// A PSD factor of the cone: `indices` are the s(s+1)/2 canonical
/// coordinates of the tested sub-matrix (column-major lower triangle) and
/// `rectangle` the s(r-s) free cross-covariance coordinates paired with it.
struct PsdDescriptor {
    int block = 0;
    int size = 0;
    std::vector<int> indices;
    std::vector<int> rectangle;
};

struct IndexSets {
    int q = 0;
    std::vector<int> zero_set;
    std::vector<int> linear_set;  // includes every PSD descriptor's rectangle
    std::vector<int> halfline_set;
    std::vector<PsdDescriptor> psd;
};

IndexSets tested_index_sets(const TestStructure& ts);

/// Position of Gamma_k(row, col), row >= col, in the canonical flattening.
int gamma_index(const TestStructure& ts, std::size_t block, int row, int col);

/// Test structure mapping the alternative spec onto the null spec.
TestStructure infer_test(const LmmSpec& alternative, const LmmSpec& null);

/// Structures carried by two summaries: the null may repeat the alternative's
/// description or omit it (empty layout and no fixed count).
TestStructure infer_test(const TestStructure& alternative, const TestStructure& null);

/// "Testing that variance of age is null" and similar.
std::string describe_null(const TestStructure& ts);
std::string describe_alternative(const TestStructure& ts);

}  // namespace conetest
