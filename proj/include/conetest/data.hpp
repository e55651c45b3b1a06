#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace conetest {

/// Observations of one individual: J responses and a J x c covariate matrix.
struct IndividualData {
    std::string id;
    Eigen::VectorXd responses;
    Eigen::MatrixXd covariates;
};

/// Grouped longitudinal observations. All individuals share the covariate
/// columns listed in column_names; categorical source columns are stored as
/// 0/1 indicator columns, recorded in categorical_columns.
class Dataset {
public:
    Dataset() = default;
    Dataset(std::vector<IndividualData> individuals, std::vector<std::string> column_names,
            std::map<std::string, std::vector<std::string>> categorical_columns = {});

    const std::vector<IndividualData>& individuals() const noexcept { return individuals_; }
    const IndividualData& individual(std::size_t i) const { return individuals_.at(i); }
    std::size_t size() const noexcept { return individuals_.size(); }
    std::size_t total_rows() const noexcept;

    const std::vector<std::string>& column_names() const noexcept { return column_names_; }
    const std::map<std::string, std::vector<std::string>>& categorical_columns() const noexcept {
        return categorical_columns_;
    }
    /// Index of a stored column, or -1.
    int column_index(std::string_view name) const;

    /// Same covariates, new responses (one vector per individual).
    Dataset with_responses(std::vector<Eigen::VectorXd> responses) const;

private:
    void validate() const;

    std::vector<IndividualData> individuals_;
    std::vector<std::string> column_names_;
    std::map<std::string, std::vector<std::string>> categorical_columns_;
};

struct ColumnRoles {
    std::string group;
    std::string response;
    std::vector<std::string> covariates;
    /// categorical column -> reference level
    std::map<std::string, std::string> categorical;
};

Dataset load_csv(const std::filesystem::path& path, const ColumnRoles& roles);
Dataset parse_csv(std::istream& in, const ColumnRoles& roles, const std::string& source = "<stream>");

/// A model term: the intercept (no factors), a column, or a product of columns.
struct Term {
    std::vector<std::string> factors;

    bool is_intercept() const noexcept { return factors.empty(); }
    std::string label() const;
    bool operator==(const Term&) const = default;

    static Term parse(std::string_view text);
};

/// Parses "1 + Sex + age + Sex:age". "0" or an empty string yields no terms.
std::vector<Term> parse_terms(std::string_view formula);

/// Source column names a term list references (intercept excluded).
std::vector<std::string> referenced_columns(const std::vector<Term>& terms);

struct IndividualDesign {
    Eigen::MatrixXd fixed;   // J_i x b
    Eigen::MatrixXd random;  // J_i x p
};

struct Design {
    std::vector<std::string> fixed_columns;
    std::vector<std::string> random_columns;
    std::vector<IndividualDesign> individuals;
};

/// Builds X_i and Z_i. Columns follow declaration order; a term naming a
/// categorical source expands to one column per non-reference level.
Design design_matrices(const Dataset& ds, const std::vector<Term>& fixed_terms,
                       const std::vector<Term>& random_terms);

}  // namespace conetest
