#include "conetest/structure.hpp"

#include "conetest/errors.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <set>

namespace conetest {

namespace {

int tri(int r) { return r * (r + 1) / 2; }

// Offset of (row, col), row >= col, inside the column-major lower triangle
// of an r x r block.
int vech_offset(int r, int row, int col) { return col * r - col * (col - 1) / 2 + (row - col); }

std::string join_names(const std::vector<std::string>& names) {
    if (names.empty()) return {};
    std::string out = names.front();
    for (std::size_t i = 1; i < names.size(); ++i) out += (i + 1 == names.size() ? " and " : ", ") + names[i];
    return out;
}

std::string random_name(const TestStructure& ts, int index) {
    const auto i = static_cast<std::size_t>(index);
    return i < ts.random_names.size() ? ts.random_names[i] : "random effect " + std::to_string(index + 1);
}

std::string fixed_name(const TestStructure& ts, int index) {
    const auto i = static_cast<std::size_t>(index);
    return i < ts.fixed_names.size() ? ts.fixed_names[i] : "fixed effect " + std::to_string(index + 1);
}

}  // namespace

std::string to_string(BlockTestKind kind) {
    switch (kind) {
        case BlockTestKind::untested: return "untested";
        case BlockTestKind::covariances_only: return "covariances_only";
        case BlockTestKind::full: return "full";
        case BlockTestKind::subblock: return "subblock";
    }
    return "untested";
}

BlockTestKind block_test_kind_from(const std::string& text) {
    if (text == "untested") return BlockTestKind::untested;
    if (text == "covariances_only") return BlockTestKind::covariances_only;
    if (text == "full") return BlockTestKind::full;
    if (text == "subblock") return BlockTestKind::subblock;
    throw SchemaError("unknown block test kind '" + text + "'");
}

std::vector<std::pair<int, int>> TestStructure::tested_pairs(std::size_t block) const {
    const BlockTest& bt = block_tests.at(block);
    if (bt.kind != BlockTestKind::covariances_only) return {};
    if (!bt.pairs.empty()) return bt.pairs;
    std::vector<std::pair<int, int>> out;
    const int r = layout.blocks.at(block);
    for (int c = 0; c < r && static_cast<int>(out.size()) < bt.t; ++c)
        for (int row = c + 1; row < r && static_cast<int>(out.size()) < bt.t; ++row) out.emplace_back(row, c);
    return out;
}

bool TestStructure::tests_anything() const noexcept {
    if (!tested_fixed.empty()) return true;
    return std::any_of(block_tests.begin(), block_tests.end(),
                       [](const BlockTest& bt) { return bt.kind != BlockTestKind::untested; });
}

void TestStructure::validate() const {
    if (b < 0) throw ValidationError("fixed-effect count must be non-negative");
    if (residual_param_count < 1) throw ValidationError("residual_param_count must be positive");
    if (block_tests.size() != layout.blocks.size())
        throw ValidationError("one block test is required per covariance block");
    std::set<int> seen;
    for (int idx : tested_fixed) {
        if (idx < 0 || idx >= b) throw ValidationError("tested fixed-effect index " + std::to_string(idx) + " out of range");
        if (!seen.insert(idx).second) throw ValidationError("tested fixed-effect index " + std::to_string(idx) + " repeated");
    }
    for (std::size_t k = 0; k < layout.blocks.size(); ++k) {
        const int r = layout.blocks[k];
        const BlockTest& bt = block_tests[k];
        if (r <= 0) throw ValidationError("covariance blocks must have positive size");
        const std::string where = "block " + std::to_string(k + 1);
        switch (bt.kind) {
            case BlockTestKind::covariances_only: {
                if (bt.t < 1 || bt.t > r * (r - 1) / 2)
                    throw ValidationError(where + ": covariances_only requires 1 <= t <= r(r-1)/2");
                if (!bt.pairs.empty()) {
                    if (static_cast<int>(bt.pairs.size()) != bt.t)
                        throw ValidationError(where + ": number of tested pairs differs from t");
                    std::set<std::pair<int, int>> uniq;
                    for (const auto& [row, col] : bt.pairs) {
                        if (!(row > col && col >= 0 && row < r))
                            throw ValidationError(where + ": tested pair outside the lower triangle");
                        if (!uniq.insert({row, col}).second) throw ValidationError(where + ": tested pair repeated");
                    }
                }
                break;
            }
            case BlockTestKind::subblock:
                if (bt.s < 1 || bt.s >= r) throw ValidationError(where + ": subblock requires 1 <= s < r");
                break;
            case BlockTestKind::untested:
            case BlockTestKind::full: break;
        }
    }
    if (!tests_anything()) throw NestednessError("nothing is tested: the two models are identical");
}

bool TestStructure::same_test(const TestStructure& o) const {
    return b == o.b && tested_fixed == o.tested_fixed && layout == o.layout && block_tests == o.block_tests &&
           residual_param_count == o.residual_param_count;
}

ConeDims cone_dims(const TestStructure& ts) {
    ConeDims d;
    d.q = ts.q();
    int tested = ts.r_f();
    int linear = ts.r_f();
    for (std::size_t k = 0; k < ts.layout.blocks.size(); ++k) {
        const int r = ts.layout.blocks[k];
        const BlockTest& bt = ts.block_tests[k];
        switch (bt.kind) {
            case BlockTestKind::untested: break;
            case BlockTestKind::covariances_only:
                tested += bt.t;
                linear += bt.t;
                break;
            case BlockTestKind::full: tested += tri(r); break;
            case BlockTestKind::subblock:
                tested += tri(bt.s) + bt.s * (r - bt.s);
                linear += bt.s * (r - bt.s);
                break;
        }
    }
    d.a = d.q - tested;
    d.d1 = linear;
    d.df_max = d.q - d.a;
    d.n_weights = d.df_max - d.d1 + 1;
    return d;
}

int gamma_index(const TestStructure& ts, std::size_t block, int row, int col) {
    int base = ts.b;
    for (std::size_t k = 0; k < block; ++k) base += tri(ts.layout.blocks[k]);
    return base + vech_offset(ts.layout.blocks.at(block), row, col);
}

IndexSets tested_index_sets(const TestStructure& ts) {
    IndexSets sets;
    sets.q = ts.q();
    std::set<int> tested_fixed(ts.tested_fixed.begin(), ts.tested_fixed.end());
    for (int i = 0; i < ts.b; ++i) (tested_fixed.count(i) ? sets.linear_set : sets.zero_set).push_back(i);

    for (std::size_t k = 0; k < ts.layout.blocks.size(); ++k) {
        const int r = ts.layout.blocks[k];
        const BlockTest& bt = ts.block_tests[k];
        const auto pairs = ts.tested_pairs(k);
        const std::set<std::pair<int, int>> pair_set(pairs.begin(), pairs.end());
        PsdDescriptor psd;
        psd.block = static_cast<int>(k);
        for (int c = 0; c < r; ++c)
            for (int row = c; row < r; ++row) {
                const int idx = gamma_index(ts, k, row, c);
                switch (bt.kind) {
                    case BlockTestKind::untested: sets.zero_set.push_back(idx); break;
                    case BlockTestKind::covariances_only:
                        (pair_set.count({row, c}) ? sets.linear_set : sets.zero_set).push_back(idx);
                        break;
                    case BlockTestKind::full: psd.indices.push_back(idx); break;
                    case BlockTestKind::subblock: {
                        const int lead = r - bt.s;
                        if (c >= lead) {
                            psd.indices.push_back(idx);
                        } else if (row >= lead) {
                            psd.rectangle.push_back(idx);
                            sets.linear_set.push_back(idx);
                        } else {
                            sets.zero_set.push_back(idx);
                        }
                        break;
                    }
                }
            }
        if (bt.kind == BlockTestKind::full || bt.kind == BlockTestKind::subblock) {
            psd.size = bt.kind == BlockTestKind::full ? r : bt.s;
            if (psd.size == 1) {
                sets.halfline_set.push_back(psd.indices.front());
            } else {
                sets.psd.push_back(std::move(psd));
            }
        }
    }
    const int first_residual = ts.b + ts.layout.parameter_count();
    for (int i = 0; i < ts.residual_param_count; ++i) sets.zero_set.push_back(first_residual + i);
    std::sort(sets.zero_set.begin(), sets.zero_set.end());
    std::sort(sets.linear_set.begin(), sets.linear_set.end());
    std::sort(sets.halfline_set.begin(), sets.halfline_set.end());
    return sets;
}

// ---------------------------------------------------------------------------
// Nestedness
// ---------------------------------------------------------------------------

TestStructure infer_test(const LmmSpec& alt, const LmmSpec& null) {
    TestStructure ts;
    ts.b = alt.b();
    ts.layout = alt.layout;
    ts.residual_param_count = 1;
    for (const auto& t : alt.fixed_terms) ts.fixed_names.push_back(t.label());
    for (const auto& t : alt.random_terms) ts.random_names.push_back(t.label());

    for (const auto& t : null.fixed_terms)
        if (std::find(alt.fixed_terms.begin(), alt.fixed_terms.end(), t) == alt.fixed_terms.end())
            throw NestednessError("fixed term '" + t.label() + "' of the null model is absent from the alternative");
    for (int i = 0; i < alt.b(); ++i) {
        const auto& t = alt.fixed_terms[static_cast<std::size_t>(i)];
        if (std::find(null.fixed_terms.begin(), null.fixed_terms.end(), t) == null.fixed_terms.end())
            ts.tested_fixed.push_back(i);
    }

    // Locate each null random term inside the alternative.
    struct Slot {
        int block;
        int pos;
    };
    auto locate = [&](const Term& term) -> Slot {
        int off = 0;
        for (std::size_t k = 0; k < alt.layout.blocks.size(); ++k) {
            const int r = alt.layout.blocks[k];
            for (int j = 0; j < r; ++j)
                if (alt.random_terms[static_cast<std::size_t>(off + j)] == term) return {static_cast<int>(k), j};
            off += r;
        }
        throw NestednessError("random term '" + term.label() + "' of the null model is absent from the alternative");
    };

    // Null blocks expressed as positions within alternative blocks.
    std::vector<std::vector<std::vector<int>>> null_blocks(alt.layout.blocks.size());
    int off = 0;
    for (std::size_t nb = 0; nb < null.layout.blocks.size(); ++nb) {
        const int r0 = null.layout.blocks[nb];
        std::vector<int> positions;
        int owner = -1;
        for (int j = 0; j < r0; ++j) {
            const Slot slot = locate(null.random_terms[static_cast<std::size_t>(off + j)]);
            if (owner >= 0 && slot.block != owner)
                throw NestednessError("null covariance block " + std::to_string(nb + 1) +
                                      " spans several blocks of the alternative");
            owner = slot.block;
            positions.push_back(slot.pos);
        }
        off += r0;
        null_blocks[static_cast<std::size_t>(owner)].push_back(std::move(positions));
    }

    for (std::size_t k = 0; k < alt.layout.blocks.size(); ++k) {
        const int r = alt.layout.blocks[k];
        const auto& parts = null_blocks[k];
        const std::string where = "covariance block " + std::to_string(k + 1) + " of the alternative";
        BlockTest bt;
        std::vector<int> covered;
        for (const auto& part : parts) covered.insert(covered.end(), part.begin(), part.end());
        std::vector<int> sorted = covered;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw NestednessError(where + ": a random term appears twice in the null model");
        if (parts.empty()) {
            bt.kind = BlockTestKind::full;
        } else if (static_cast<int>(covered.size()) == r) {
            if (parts.size() == 1) {
                bt.kind = BlockTestKind::untested;
            } else {
                bt.kind = BlockTestKind::covariances_only;
                std::vector<int> part_of(static_cast<std::size_t>(r));
                for (std::size_t pi = 0; pi < parts.size(); ++pi)
                    for (int pos : parts[pi]) part_of[static_cast<std::size_t>(pos)] = static_cast<int>(pi);
                for (int c = 0; c < r; ++c)
                    for (int row = c + 1; row < r; ++row)
                        if (part_of[static_cast<std::size_t>(row)] != part_of[static_cast<std::size_t>(c)])
                            bt.pairs.emplace_back(row, c);
                bt.t = static_cast<int>(bt.pairs.size());
            }
        } else {
            const int kept = static_cast<int>(covered.size());
            bool leading = parts.size() == 1;
            for (int j = 0; leading && j < kept; ++j) leading = parts.front()[static_cast<std::size_t>(j)] == j;
            if (!leading)
                throw NestednessError(where + ": the null keeps a non-leading sub-block or splits a reduced block; "
                                              "declare tested random effects last within their block");
            bt.kind = BlockTestKind::subblock;
            bt.s = r - kept;
        }
        ts.block_tests.push_back(std::move(bt));
    }
    ts.validate();
    return ts;
}

TestStructure infer_test(const TestStructure& alt, const TestStructure& null) {
    if (!alt.same_test(null))
        throw NestednessError("the two summaries describe different test structures");
    alt.validate();
    return alt;
}

std::string describe_null(const TestStructure& ts) {
    std::vector<std::string> variances;
    std::vector<std::string> covariances;
    std::vector<std::string> fixed;
    for (int i : ts.tested_fixed) fixed.push_back(fixed_name(ts, i));
    for (std::size_t k = 0; k < ts.layout.blocks.size(); ++k) {
        const int r = ts.layout.blocks[k];
        const int base = ts.layout.offset(k);
        const BlockTest& bt = ts.block_tests[k];
        switch (bt.kind) {
            case BlockTestKind::untested: break;
            case BlockTestKind::full:
                for (int j = 0; j < r; ++j) variances.push_back(random_name(ts, base + j));
                break;
            case BlockTestKind::subblock:
                for (int j = r - bt.s; j < r; ++j) variances.push_back(random_name(ts, base + j));
                break;
            case BlockTestKind::covariances_only:
                for (const auto& [row, col] : ts.tested_pairs(k))
                    covariances.push_back(random_name(ts, base + col) + " and " + random_name(ts, base + row));
                break;
        }
    }
    std::vector<std::string> parts;
    std::size_t count = 0;
    if (!fixed.empty()) {
        parts.push_back(std::string(fixed.size() > 1 ? "fixed effects " : "fixed effect ") + join_names(fixed));
        count += fixed.size();
    }
    if (!variances.empty()) {
        parts.push_back(std::string(variances.size() > 1 ? "variances of " : "variance of ") + join_names(variances));
        count += variances.size();
    }
    if (!covariances.empty()) {
        std::string text = covariances.size() > 1 ? "covariances of " : "covariance of ";
        for (std::size_t i = 0; i < covariances.size(); ++i)
            text += (i == 0 ? "" : (i + 1 == covariances.size() ? " and " : ", ")) + std::string("(") +
                    covariances[i] + ")";
        parts.push_back(text);
        count += covariances.size();
    }
    std::string sentence = "Testing that ";
    for (std::size_t i = 0; i < parts.size(); ++i) sentence += (i == 0 ? "" : " and ") + parts[i];
    sentence += count > 1 ? " are null" : " is null";
    return sentence;
}

std::string describe_alternative(const TestStructure& ts) {
    std::string text = describe_null(ts);
    const std::string prefix = "Testing that ";
    text = text.substr(prefix.size());
    const auto pos = text.rfind(" is null") != std::string::npos ? text.rfind(" is null") : text.rfind(" are null");
    return text.substr(0, pos) + " not all null";
}

LmmSpec constrain(const LmmSpec& spec, const TestStructure& null) {
    if (null.b != spec.b() || !(null.layout == spec.layout) || null.block_tests.size() != spec.layout.blocks.size())
        throw ValidationError("test structure does not match the model's fixed effects and covariance layout");
    if (null.residual_param_count != 1)
        throw ValidationError("the fitter supports a single residual variance parameter");
    if (!null.tests_anything()) return spec;
    null.validate();

    LmmSpec out;
    const std::set<int> dropped(null.tested_fixed.begin(), null.tested_fixed.end());
    for (int i = 0; i < spec.b(); ++i)
        if (!dropped.count(i)) out.fixed_terms.push_back(spec.fixed_terms[static_cast<std::size_t>(i)]);

    for (std::size_t k = 0; k < spec.layout.blocks.size(); ++k) {
        const int r = spec.layout.blocks[k];
        const int base = spec.layout.offset(k);
        auto term = [&](int j) { return spec.random_terms[static_cast<std::size_t>(base + j)]; };
        const BlockTest& bt = null.block_tests[k];
        switch (bt.kind) {
            case BlockTestKind::untested:
                for (int j = 0; j < r; ++j) out.random_terms.push_back(term(j));
                out.layout.blocks.push_back(r);
                break;
            case BlockTestKind::full: break;
            case BlockTestKind::subblock:
                for (int j = 0; j < r - bt.s; ++j) out.random_terms.push_back(term(j));
                out.layout.blocks.push_back(r - bt.s);
                break;
            case BlockTestKind::covariances_only: {
                // Effects linked by an untested covariance must share a block;
                // every covariance across the resulting groups must be tested.
                const auto pairs = null.tested_pairs(k);
                const std::set<std::pair<int, int>> tested(pairs.begin(), pairs.end());
                std::vector<int> group(static_cast<std::size_t>(r));
                std::iota(group.begin(), group.end(), 0);
                std::function<int(int)> find = [&](int x) {
                    return group[static_cast<std::size_t>(x)] == x ? x : group[static_cast<std::size_t>(x)] = find(group[static_cast<std::size_t>(x)]);
                };
                for (int c = 0; c < r; ++c)
                    for (int row = c + 1; row < r; ++row)
                        if (!tested.count({row, c})) group[static_cast<std::size_t>(find(row))] = find(c);
                for (int c = 0; c < r; ++c)
                    for (int row = c + 1; row < r; ++row)
                        if (tested.count({row, c}) && find(row) == find(c))
                            throw ValidationError("block " + std::to_string(k + 1) +
                                                  ": tested covariances do not split the block into independent groups");
                std::vector<int> roots;
                for (int j = 0; j < r; ++j)
                    if (find(j) == j) roots.push_back(j);
                for (int root : roots) {
                    int size = 0;
                    for (int j = 0; j < r; ++j)
                        if (find(j) == root) {
                            out.random_terms.push_back(term(j));
                            ++size;
                        }
                    out.layout.blocks.push_back(size);
                }
                break;
            }
        }
    }
    out.validate();
    if (spec.q() - out.q() != cone_dims(null).df_max)
        throw ValidationError("null model does not remove exactly the tested parameters");
    return out;
}

}  // namespace conetest
