#include "conetest/data.hpp"

#include "conetest/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

namespace conetest {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cell.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cell.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            cells.push_back(trim(cell));
            cell.clear();
        } else {
            cell.push_back(ch);
        }
    }
    cells.push_back(trim(cell));
    return cells;
}

bool is_missing(const std::string& cell) {
    return cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan";
}

bool parse_number(const std::string& cell, double& out) {
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    if (begin != end && *begin == '+') ++begin;
    const auto [ptr, ec] = std::from_chars(begin, end, out);
    return ec == std::errc() && ptr == end && std::isfinite(out);
}

}  // namespace

Dataset::Dataset(std::vector<IndividualData> individuals, std::vector<std::string> column_names,
                 std::map<std::string, std::vector<std::string>> categorical_columns)
    : individuals_(std::move(individuals)),
      column_names_(std::move(column_names)),
      categorical_columns_(std::move(categorical_columns)) {
    validate();
}

void Dataset::validate() const {
    std::set<std::string> ids;
    const auto ncol = static_cast<Eigen::Index>(column_names_.size());
    for (const auto& ind : individuals_) {
        if (ind.responses.size() == 0)
            throw ValidationError("individual '" + ind.id + "' has no observations");
        if (ind.covariates.rows() != ind.responses.size())
            throw ValidationError("individual '" + ind.id + "': response count does not match covariate rows");
        if (ind.covariates.cols() != ncol)
            throw ValidationError("individual '" + ind.id + "': covariate column count mismatch");
        if (!ind.responses.allFinite() || !ind.covariates.allFinite())
            throw ValidationError("individual '" + ind.id + "' has non-finite values");
        if (!ids.insert(ind.id).second) throw ValidationError("duplicate individual id '" + ind.id + "'");
    }
}

std::size_t Dataset::total_rows() const noexcept {
    std::size_t rows = 0;
    for (const auto& ind : individuals_) rows += static_cast<std::size_t>(ind.responses.size());
    return rows;
}

int Dataset::column_index(std::string_view name) const {
    const auto it = std::find(column_names_.begin(), column_names_.end(), name);
    return it == column_names_.end() ? -1 : static_cast<int>(it - column_names_.begin());
}

Dataset Dataset::with_responses(std::vector<Eigen::VectorXd> responses) const {
    if (responses.size() != individuals_.size())
        throw ValidationError("response list does not match individual count");
    std::vector<IndividualData> copy = individuals_;
    for (std::size_t i = 0; i < copy.size(); ++i) {
        if (responses[i].size() != copy[i].responses.size())
            throw ValidationError("response length mismatch for individual '" + copy[i].id + "'");
        copy[i].responses = std::move(responses[i]);
    }
    return Dataset(std::move(copy), column_names_, categorical_columns_);
}

Dataset load_csv(const std::filesystem::path& path, const ColumnRoles& roles) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open data file '" + path.string() + "'");
    return parse_csv(in, roles, path.string());
}

Dataset parse_csv(std::istream& in, const ColumnRoles& roles, const std::string& source) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(source + ": missing header row");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    const auto header = split_csv_line(line);

    auto locate = [&](const std::string& name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw ConfigError(source + ": column '" + name + "' not found");
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t group_col = locate(roles.group);
    const std::size_t response_col = locate(roles.response);
    std::vector<std::size_t> covariate_cols;
    for (const auto& name : roles.covariates) covariate_cols.push_back(locate(name));
    for (const auto& [name, ref] : roles.categorical) {
        if (std::find(roles.covariates.begin(), roles.covariates.end(), name) == roles.covariates.end())
            throw ConfigError(source + ": categorical column '" + name + "' is not a declared covariate");
        if (ref.empty()) throw ConfigError(source + ": categorical column '" + name + "' lacks a reference level");
    }

    struct Row {
        std::string group;
        double response;
        std::vector<std::string> cells;
    };
    std::vector<Row> rows;
    long row_index = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        ++row_index;
        auto cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw ParseError(source + ": row " + std::to_string(row_index) + " has " +
                                 std::to_string(cells.size()) + " cells, expected " +
                                 std::to_string(header.size()),
                             row_index);
        Row row;
        row.group = cells[group_col];
        if (row.group.empty() || row.group == "NA")
            throw ValidationError(source + ": row " + std::to_string(row_index) + " has an empty group");
        const auto& rcell = cells[response_col];
        if (is_missing(rcell))
            throw ParseError(source + ": row " + std::to_string(row_index) + " has a missing response", row_index);
        if (!parse_number(rcell, row.response))
            throw ParseError(source + ": row " + std::to_string(row_index) + " has non-numeric response '" +
                                 rcell + "'",
                             row_index);
        for (std::size_t c = 0; c < covariate_cols.size(); ++c) {
            const auto& cell = cells[covariate_cols[c]];
            if (is_missing(cell))
                throw ParseError(source + ": row " + std::to_string(row_index) + " has a missing value in '" +
                                     roles.covariates[c] + "'",
                                 row_index);
            row.cells.push_back(cell);
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ValidationError(source + ": no data rows");

    // Column layout: numeric covariates keep their name, categorical ones
    // expand to <name><level> for each non-reference level (sorted).
    std::vector<std::string> column_names;
    std::map<std::string, std::vector<std::string>> categorical_columns;
    struct Source {
        bool categorical;
        std::vector<std::string> levels;
    };
    std::vector<Source> sources;
    for (std::size_t c = 0; c < roles.covariates.size(); ++c) {
        const auto& name = roles.covariates[c];
        const auto cat = roles.categorical.find(name);
        if (cat == roles.categorical.end()) {
            sources.push_back({false, {}});
            column_names.push_back(name);
            continue;
        }
        std::set<std::string> levels;
        for (const auto& row : rows) levels.insert(row.cells[c]);
        if (!levels.count(cat->second))
            throw ConfigError(source + ": reference level '" + cat->second + "' absent from column '" + name + "'");
        Source src{true, {}};
        for (const auto& level : levels) {
            if (level == cat->second) continue;
            src.levels.push_back(level);
            column_names.push_back(name + level);
            categorical_columns[name].push_back(name + level);
        }
        if (src.levels.empty()) categorical_columns[name] = {};
        sources.push_back(std::move(src));
    }

    std::vector<std::string> order;
    std::unordered_map<std::string, std::vector<std::size_t>> members;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        auto [it, inserted] = members.try_emplace(rows[r].group);
        if (inserted) order.push_back(rows[r].group);
        it->second.push_back(r);
    }

    std::vector<IndividualData> individuals;
    individuals.reserve(order.size());
    const auto ncol = static_cast<Eigen::Index>(column_names.size());
    for (const auto& id : order) {
        const auto& idx = members[id];
        IndividualData ind;
        ind.id = id;
        ind.responses.resize(static_cast<Eigen::Index>(idx.size()));
        ind.covariates.setZero(static_cast<Eigen::Index>(idx.size()), ncol);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const Row& row = rows[idx[k]];
            const auto kk = static_cast<Eigen::Index>(k);
            ind.responses(kk) = row.response;
            Eigen::Index col = 0;
            for (std::size_t c = 0; c < sources.size(); ++c) {
                if (!sources[c].categorical) {
                    double value = 0.0;
                    if (!parse_number(row.cells[c], value))
                        throw ParseError(source + ": row " + std::to_string(idx[k] + 1) + " has non-numeric value '" +
                                             row.cells[c] + "' in '" + roles.covariates[c] + "'",
                                         static_cast<long>(idx[k] + 1));
                    ind.covariates(kk, col++) = value;
                } else {
                    for (const auto& level : sources[c].levels)
                        ind.covariates(kk, col++) = row.cells[c] == level ? 1.0 : 0.0;
                }
            }
        }
        individuals.push_back(std::move(ind));
    }
    return Dataset(std::move(individuals), std::move(column_names), std::move(categorical_columns));
}

std::string Term::label() const {
    if (factors.empty()) return "(Intercept)";
    std::string out = factors.front();
    for (std::size_t i = 1; i < factors.size(); ++i) out += ":" + factors[i];
    return out;
}

Term Term::parse(std::string_view text) {
    const std::string t = trim(text);
    if (t.empty()) throw ConfigError("empty model term");
    if (t == "1") return Term{};
    Term term;
    std::size_t start = 0;
    while (start <= t.size()) {
        const auto stop = t.find_first_of(":*", start);
        const std::string factor = trim(std::string_view(t).substr(start, stop - start));
        if (factor.empty() || factor == "1") throw ConfigError("malformed model term '" + t + "'");
        term.factors.push_back(factor);
        if (stop == std::string::npos) break;
        start = stop + 1;
    }
    if (term.factors.size() > 2) throw ConfigError("interaction of more than two columns in '" + t + "'");
    return term;
}

std::vector<Term> parse_terms(std::string_view formula) {
    std::vector<Term> terms;
    const std::string f = trim(formula);
    if (f.empty() || f == "0") return terms;
    std::size_t start = 0;
    while (true) {
        const auto stop = f.find('+', start);
        const std::string piece = trim(std::string_view(f).substr(start, stop - start));
        if (piece != "0") {
            Term term = Term::parse(piece);
            if (std::find(terms.begin(), terms.end(), term) != terms.end())
                throw ConfigError("duplicate model term '" + piece + "'");
            terms.push_back(std::move(term));
        }
        if (stop == std::string::npos) break;
        start = stop + 1;
    }
    return terms;
}

std::vector<std::string> referenced_columns(const std::vector<Term>& terms) {
    std::vector<std::string> out;
    for (const auto& term : terms)
        for (const auto& factor : term.factors)
            if (std::find(out.begin(), out.end(), factor) == out.end()) out.push_back(factor);
    return out;
}

namespace {

struct ResolvedTerm {
    std::vector<std::string> names;
    std::vector<std::vector<int>> products;  // column indices multiplied together; empty = intercept
};

std::vector<std::pair<std::string, int>> resolve_factor(const Dataset& ds, const std::string& factor) {
    const int direct = ds.column_index(factor);
    if (direct >= 0) return {{factor, direct}};
    const auto cat = ds.categorical_columns().find(factor);
    if (cat == ds.categorical_columns().end() || cat->second.empty())
        throw ConfigError("unknown column '" + factor + "' in model formula");
    std::vector<std::pair<std::string, int>> out;
    for (const auto& name : cat->second) out.emplace_back(name, ds.column_index(name));
    return out;
}

ResolvedTerm resolve(const Dataset& ds, const Term& term) {
    ResolvedTerm out;
    if (term.is_intercept()) {
        out.names.push_back("(Intercept)");
        out.products.emplace_back();
        return out;
    }
    std::vector<std::pair<std::string, std::vector<int>>> partial{{"", {}}};
    for (const auto& factor : term.factors) {
        std::vector<std::pair<std::string, std::vector<int>>> next;
        for (const auto& [name, idx] : partial)
            for (const auto& [col_name, col] : resolve_factor(ds, factor)) {
                auto cols = idx;
                cols.push_back(col);
                next.emplace_back(name.empty() ? col_name : name + ":" + col_name, std::move(cols));
            }
        partial = std::move(next);
    }
    for (auto& [name, cols] : partial) {
        out.names.push_back(name);
        out.products.push_back(cols);
    }
    return out;
}

std::vector<ResolvedTerm> resolve_all(const Dataset& ds, const std::vector<Term>& terms,
                                      std::vector<std::string>& names, bool intercept_first) {
    std::vector<const Term*> ordered;
    for (const auto& t : terms)
        if (!intercept_first || t.is_intercept()) ordered.push_back(&t);
    if (intercept_first)
        for (const auto& t : terms)
            if (!t.is_intercept()) ordered.push_back(&t);
    std::vector<ResolvedTerm> resolved;
    for (const Term* t : ordered) {
        resolved.push_back(resolve(ds, *t));
        names.insert(names.end(), resolved.back().names.begin(), resolved.back().names.end());
    }
    return resolved;
}

Eigen::MatrixXd build(const IndividualData& ind, const std::vector<ResolvedTerm>& terms, Eigen::Index ncols) {
    Eigen::MatrixXd m(ind.responses.size(), ncols);
    Eigen::Index col = 0;
    for (const auto& term : terms)
        for (const auto& product : term.products) {
            m.col(col).setOnes();
            for (int c : product) m.col(col).array() *= ind.covariates.col(c).array();
            ++col;
        }
    return m;
}

}  // namespace

Design design_matrices(const Dataset& ds, const std::vector<Term>& fixed_terms,
                       const std::vector<Term>& random_terms) {
    Design design;
    const auto fixed = resolve_all(ds, fixed_terms, design.fixed_columns, true);
    const auto random = resolve_all(ds, random_terms, design.random_columns, false);
    const auto b = static_cast<Eigen::Index>(design.fixed_columns.size());
    const auto p = static_cast<Eigen::Index>(design.random_columns.size());
    design.individuals.reserve(ds.size());
    for (const auto& ind : ds.individuals())
        design.individuals.push_back({build(ind, fixed, b), build(ind, random, p)});
    return design;
}

}  // namespace conetest
