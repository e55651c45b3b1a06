#include "conetest/engine.hpp"

#include "conetest/errors.hpp"
#include "conetest/parallel.hpp"
#include "conetest/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace conetest {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Fit summaries
// ---------------------------------------------------------------------------

namespace {

class SchemaReader {
public:
    explicit SchemaReader(std::string source) : source_(std::move(source)) {}

    [[noreturn]] void fail(const std::string& path, const std::string& what) const {
        throw SchemaError(source_ + ": " + (path.empty() ? std::string("document") : path) + ": " + what);
    }

    void only_keys(const json& obj, const std::string& path, const std::set<std::string>& allowed) const {
        if (!obj.is_object()) fail(path, "expected an object");
        std::string unknown;
        for (const auto& [key, value] : obj.items())
            if (!allowed.count(key)) unknown += (unknown.empty() ? "" : ", ") + key;
        if (!unknown.empty()) fail(path, "unknown field(s) " + unknown);
    }

    double number(const json& v, const std::string& path) const {
        if (!v.is_number()) fail(path, "expected a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) fail(path, "expected a finite number");
        return d;
    }

    int integer(const json& v, const std::string& path, int lo) const {
        if (!v.is_number_integer()) fail(path, "expected an integer");
        const auto i = v.get<long long>();
        if (i < lo || i > 1000000) fail(path, "integer out of range");
        return static_cast<int>(i);
    }

    std::vector<std::string> strings(const json& v, const std::string& path) const {
        if (!v.is_array()) fail(path, "expected an array of strings");
        std::vector<std::string> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_string()) fail(path + "[" + std::to_string(i) + "]", "expected a string");
            out.push_back(v[i].get<std::string>());
        }
        return out;
    }

    MatrixXd matrix(const json& v, const std::string& path) const {
        if (!v.is_array() || v.empty()) fail(path, "expected a non-empty array of rows");
        const std::size_t rows = v.size();
        MatrixXd m(rows, rows);
        for (std::size_t i = 0; i < rows; ++i) {
            const std::string rp = path + "[" + std::to_string(i) + "]";
            if (!v[i].is_array()) fail(rp, "expected an array");
            if (v[i].size() != rows) fail(rp, "expected " + std::to_string(rows) + " entries (square matrix)");
            for (std::size_t j = 0; j < rows; ++j)
                m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                    number(v[i][j], rp + "[" + std::to_string(j) + "]");
        }
        return m;
    }

private:
    std::string source_;
};

TestStructure read_structure(const SchemaReader& rd, const json& doc) {
    TestStructure ts;
    const json& fixed = doc.at("fixed");
    rd.only_keys(fixed, "fixed", {"count", "tested_indices", "names"});
    if (!fixed.contains("count")) rd.fail("fixed.count", "required field missing");
    ts.b = rd.integer(fixed["count"], "fixed.count", 0);
    if (fixed.contains("tested_indices")) {
        const json& idx = fixed["tested_indices"];
        if (!idx.is_array()) rd.fail("fixed.tested_indices", "expected an array");
        for (std::size_t i = 0; i < idx.size(); ++i)
            ts.tested_fixed.push_back(rd.integer(idx[i], "fixed.tested_indices[" + std::to_string(i) + "]", 0));
    }
    if (fixed.contains("names")) ts.fixed_names = rd.strings(fixed["names"], "fixed.names");

    const json& blocks = doc.at("blocks");
    if (!blocks.is_array()) rd.fail("blocks", "expected an array");
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        const std::string bp = "blocks[" + std::to_string(k) + "]";
        const json& blk = blocks[k];
        rd.only_keys(blk, bp, {"size", "test", "t", "s", "pairs", "names"});
        if (!blk.contains("size")) rd.fail(bp + ".size", "required field missing");
        if (!blk.contains("test")) rd.fail(bp + ".test", "required field missing");
        const int r = rd.integer(blk["size"], bp + ".size", 1);
        if (!blk["test"].is_string()) rd.fail(bp + ".test", "expected a string");
        BlockTest bt;
        try {
            bt.kind = block_test_kind_from(blk["test"].get<std::string>());
        } catch (const SchemaError& e) {
            rd.fail(bp + ".test", e.what());
        }
        if (blk.contains("t")) bt.t = rd.integer(blk["t"], bp + ".t", 0);
        if (blk.contains("s")) bt.s = rd.integer(blk["s"], bp + ".s", 0);
        if (bt.kind == BlockTestKind::covariances_only && !blk.contains("t") && !blk.contains("pairs"))
            rd.fail(bp + ".t", "required for covariances_only");
        if (bt.kind == BlockTestKind::subblock && !blk.contains("s")) rd.fail(bp + ".s", "required for subblock");
        if (blk.contains("pairs")) {
            const json& pairs = blk["pairs"];
            if (!pairs.is_array()) rd.fail(bp + ".pairs", "expected an array of [row, col] pairs");
            for (std::size_t i = 0; i < pairs.size(); ++i) {
                const std::string pp = bp + ".pairs[" + std::to_string(i) + "]";
                if (!pairs[i].is_array() || pairs[i].size() != 2) rd.fail(pp, "expected [row, col]");
                bt.pairs.emplace_back(rd.integer(pairs[i][0], pp + "[0]", 0), rd.integer(pairs[i][1], pp + "[1]", 0));
            }
            if (!blk.contains("t")) bt.t = static_cast<int>(bt.pairs.size());
        }
        if (blk.contains("names")) {
            const auto names = rd.strings(blk["names"], bp + ".names");
            if (static_cast<int>(names.size()) != r) rd.fail(bp + ".names", "expected one name per random effect");
            ts.random_names.insert(ts.random_names.end(), names.begin(), names.end());
        }
        ts.layout.blocks.push_back(r);
        ts.block_tests.push_back(std::move(bt));
    }
    if (!ts.random_names.empty() && static_cast<int>(ts.random_names.size()) != ts.layout.dimension())
        rd.fail("blocks", "names must be given for every block or for none");
    if (!ts.fixed_names.empty() && static_cast<int>(ts.fixed_names.size()) != ts.b)
        rd.fail("fixed.names", "expected one name per fixed effect");
    if (doc.contains("residual_param_count"))
        ts.residual_param_count = rd.integer(doc["residual_param_count"], "residual_param_count", 1);
    try {
        ts.validate();
    } catch (const NestednessError&) {
        // A structure that tests nothing is a valid description; the test
        // itself rejects it later.
    } catch (const ValidationError& e) {
        rd.fail("blocks", e.what());
    }
    return ts;
}

}  // namespace

FitSummary parse_fit_summary_text(const std::string& text, const std::string& source) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw SchemaError(source + ": invalid JSON: " + e.what());
    }
    const SchemaReader rd(source);
    rd.only_keys(doc, "",
                 {"loglik", "fixed", "blocks", "residual_param_count", "theta", "fim", "fim_is_inverse",
                  "lrt_override"});
    FitSummary s;
    s.source = source;
    if (doc.contains("loglik")) s.loglik = rd.number(doc["loglik"], "loglik");
    if (doc.contains("lrt_override")) s.lrt_override = rd.number(doc["lrt_override"], "lrt_override");

    const bool has_fixed = doc.contains("fixed");
    const bool has_blocks = doc.contains("blocks");
    if (has_fixed != has_blocks) rd.fail(has_fixed ? "blocks" : "fixed", "required together with the other structure field");
    if (has_fixed) s.structure = read_structure(rd, doc);
    else if (doc.contains("residual_param_count")) rd.fail("residual_param_count", "given without a structure");

    if (doc.contains("theta")) {
        const json& th = doc["theta"];
        if (!th.is_array()) rd.fail("theta", "expected an array");
        s.theta = VectorXd(static_cast<Eigen::Index>(th.size()));
        for (std::size_t i = 0; i < th.size(); ++i)
            (*s.theta)(static_cast<Eigen::Index>(i)) = rd.number(th[i], "theta[" + std::to_string(i) + "]");
    }
    if (doc.contains("fim")) s.fim = rd.matrix(doc["fim"], "fim");
    if (doc.contains("fim_is_inverse")) {
        if (!doc["fim_is_inverse"].is_boolean()) rd.fail("fim_is_inverse", "expected a boolean");
        s.fim_is_inverse = doc["fim_is_inverse"].get<bool>();
    }
    if (s.structure) {
        const int q = s.structure->q();
        if (s.theta && s.theta->size() != q)
            rd.fail("theta", "expected " + std::to_string(q) + " entries, found " + std::to_string(s.theta->size()));
        if (s.fim && s.fim->rows() != q)
            rd.fail("fim", "expected a " + std::to_string(q) + "x" + std::to_string(q) + " matrix, found " +
                               std::to_string(s.fim->rows()) + "x" + std::to_string(s.fim->rows()));
    }
    return s;
}

FitSummary parse_fit_summary(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open fit summary '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_fit_summary_text(buf.str(), path.string());
}

// ---------------------------------------------------------------------------
// Options
// ---------------------------------------------------------------------------

std::string to_string(PvalMode mode) {
    switch (mode) {
        case PvalMode::bounds: return "bounds";
        case PvalMode::approx: return "approx";
        case PvalMode::both: return "both";
    }
    return "bounds";
}

PvalMode pval_mode_from(const std::string& text) {
    if (text == "bounds") return PvalMode::bounds;
    if (text == "approx") return PvalMode::approx;
    if (text == "both") return PvalMode::both;
    throw ConfigError("pval must be one of bounds, approx, both (got '" + text + "')");
}

FimChoice FimChoice::from(const std::string& text) {
    FimChoice c;
    if (text == "extract") {
        c.kind = Kind::extract;
    } else if (text == "compute") {
        c.kind = Kind::compute;
    } else if (!text.empty()) {
        c.kind = Kind::file;
        c.path = text;
    } else {
        throw ConfigError("fim must be extract, compute or a file path");
    }
    return c;
}

std::string FimChoice::describe() const {
    switch (kind) {
        case Kind::extract: return "extract";
        case Kind::compute: return "compute";
        case Kind::file: return path.string();
    }
    return "extract";
}

// ---------------------------------------------------------------------------
// The test
// ---------------------------------------------------------------------------

namespace {

void check_options(const TestOptions& opts) {
    if (opts.M < 1) throw ValidationError("M must be a positive integer");
    if (opts.B < 50) throw ValidationError("B must be at least 50");
    if (opts.workers < 1) throw ValidationError("workers must be a positive integer");
}

double checked_lrt(double raw, std::vector<std::string>& warnings) {
    if (!std::isfinite(raw)) throw FitError("likelihood ratio statistic is not finite");
    if (raw < -1e-6)
        throw FitError("negative likelihood ratio statistic " + std::to_string(raw) +
                       ": the alternative fit is worse than the null fit");
    if (raw < 0) {
        warnings.push_back("slightly negative likelihood ratio statistic clamped to 0");
        return 0.0;
    }
    return raw;
}

struct MetricSource {
    std::function<MatrixXd()> covariance;
    FimKind kind = FimKind::user;
};

TestResult finish(double lrt, const TestStructure& ts, const std::optional<MetricSource>& metric,
                  std::vector<std::string> warnings, const TestOptions& opts) {
    TestResult res;
    res.lrt = lrt;
    res.structure = ts;
    res.dims = cone_dims(ts);
    res.warnings = std::move(warnings);
    res.null_description = describe_null(ts);
    res.alternative_description = describe_alternative(ts);
    res.seed = opts.seed;
    const auto [lower, upper] = pvalue_bounds(lrt, res.dims);
    res.pvalues.lower_bound = lower;
    res.pvalues.upper_bound = upper;
    if (opts.pval == PvalMode::bounds) return res;

    const Cone cone = Cone::from_structure(ts);
    if (auto exact = exact_weights(cone, res.dims)) {
        res.weights = std::move(*exact);
        res.pvalues.from_weights = pvalue_from_weights(*res.weights, lrt);
        return res;
    }
    if (!metric) throw FimInputError("Monte Carlo weights need an information matrix, and none is available");
    if (opts.M < 100 * res.dims.n_weights)
        throw ValidationError("M must be at least " + std::to_string(100 * res.dims.n_weights) +
                              " to estimate " + std::to_string(res.dims.n_weights) + " weights");
    MatrixXd V = metric->covariance();
    if (V.rows() != res.dims.q || V.cols() != res.dims.q)
        throw FimInputError("information matrix is " + std::to_string(V.rows()) + "x" + std::to_string(V.cols()) +
                            " but the model has " + std::to_string(res.dims.q) + " parameters");
    const ChiBarSample sample = draw_sample(cone, V, opts.M, opts.seed, opts.workers);
    res.weights = estimate_weights(sample, res.dims);
    res.warnings.insert(res.warnings.end(), res.weights->warnings.begin(), res.weights->warnings.end());
    res.pvalues.from_weights = pvalue_from_weights(*res.weights, lrt);
    res.pvalues.from_sample = pvalue_from_sample(sample, lrt);
    if (*res.pvalues.from_sample == 0.0)
        res.warnings.push_back("no Monte Carlo draw reaches the LRT value: the sample p-value underflows, "
                               "increase M or rely on the weights");
    res.fim_kind = metric->kind;
    res.V = std::move(V);
    res.M = opts.M;
    return res;
}

}  // namespace

TestResult test_from_statistic(double lrt, const TestStructure& ts, const std::optional<MatrixXd>& V,
                               const TestOptions& opts) {
    check_options(opts);
    std::vector<std::string> warnings;
    lrt = checked_lrt(lrt, warnings);
    ts.validate();
    std::optional<MetricSource> metric;
    if (V) metric = MetricSource{[V] { return *V; }, FimKind::user};
    return finish(lrt, ts, metric, std::move(warnings), opts);
}

TestResult var_comp_test(const FitResult& m1, const FitResult& m0, const Dataset& ds, const TestOptions& opts) {
    check_options(opts);
    const TestStructure ts = infer_test(m1.spec, m0.spec);
    std::vector<std::string> warnings;
    if (!m1.converged) warnings.push_back("the alternative model fit did not converge");
    if (!m0.converged) warnings.push_back("the null model fit did not converge");
    if (m1.n_individuals != static_cast<int>(ds.size()) || m0.n_individuals != static_cast<int>(ds.size()))
        throw ValidationError("both fits must use the supplied dataset");
    const double lrt = checked_lrt(2.0 * (m1.loglik - m0.loglik), warnings);

    MetricSource metric;
    switch (opts.fim.kind) {
        case FimChoice::Kind::extract:
            metric = {[&] { return to_V(extract_fim(m1, ds)); }, FimKind::extracted};
            break;
        case FimChoice::Kind::compute:
            metric = {[&] { return to_V(bootstrap_fim(m1, ds, opts.B, mix_seed(opts.seed, 1), opts.workers)); },
                      FimKind::bootstrap};
            break;
        case FimChoice::Kind::file:
            metric = {[&] { return to_V(load_fim(opts.fim.path, m1.spec.q(), opts.fim.is_inverse)); },
                      FimKind::user};
            break;
    }
    return finish(lrt, ts, metric, std::move(warnings), opts);
}

TestResult var_comp_test(const FitSummary& m1, const FitSummary& m0, const TestOptions& opts) {
    check_options(opts);
    if (!m1.structure)
        throw SchemaError(m1.source + ": the alternative summary must describe the test (fixed, blocks)");
    TestStructure ts;
    if (m0.structure) {
        ts = infer_test(*m1.structure, *m0.structure);
    } else {
        ts = *m1.structure;
        ts.validate();
    }

    std::vector<std::string> warnings;
    double raw = 0.0;
    if (m1.lrt_override || m0.lrt_override) {
        if (m1.lrt_override && m0.lrt_override && *m1.lrt_override != *m0.lrt_override)
            throw SchemaError("the two summaries carry different lrt_override values");
        raw = m1.lrt_override ? *m1.lrt_override : *m0.lrt_override;
        warnings.push_back("LRT taken from lrt_override instead of the log-likelihoods");
    } else {
        if (!m1.loglik) throw SchemaError(m1.source + ": loglik: required field missing");
        if (!m0.loglik) throw SchemaError(m0.source + ": loglik: required field missing");
        raw = 2.0 * (*m1.loglik - *m0.loglik);
    }
    const double lrt = checked_lrt(raw, warnings);

    const int q = ts.q();
    MetricSource metric;
    switch (opts.fim.kind) {
        case FimChoice::Kind::extract:
            metric = {[&]() -> MatrixXd {
                          if (!m1.fim)
                              throw FimInputError(m1.source + ": no 'fim' field; supply an information matrix file");
                          return to_V(make_fim(*m1.fim, FimKind::extracted, m1.fim_is_inverse));
                      },
                      FimKind::extracted};
            break;
        case FimChoice::Kind::compute:
            metric = {[&]() -> MatrixXd {
                          throw FimInputError("bootstrap information needs a fitted model; "
                                              "fit summaries cannot be refitted");
                      },
                      FimKind::bootstrap};
            break;
        case FimChoice::Kind::file:
            metric = {[&] { return to_V(load_fim(opts.fim.path, q, opts.fim.is_inverse)); }, FimKind::user};
            break;
    }
    return finish(lrt, ts, metric, std::move(warnings), opts);
}

// ---------------------------------------------------------------------------
// Coverage study
// ---------------------------------------------------------------------------

Dataset coverage_design(int n, int timepoints) {
    if (n < 1 || timepoints < 2) throw ValidationError("coverage design needs n >= 1 and at least 2 timepoints");
    std::vector<IndividualData> inds;
    inds.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        IndividualData d;
        d.id = std::to_string(i + 1);
        d.responses = VectorXd::Zero(timepoints);
        d.covariates.resize(timepoints, 1);
        for (int j = 0; j < timepoints; ++j) d.covariates(j, 0) = static_cast<double>(j) / (timepoints - 1);
        inds.push_back(std::move(d));
    }
    return Dataset(std::move(inds), {"t"});
}

CoverageTable run_coverage_study(const CoverageConfig& cfg) {
    if (cfg.R < 1) throw ValidationError("coverage study needs R >= 1 repetitions");
    if (!(cfg.sigma2 > 0)) throw ValidationError("coverage study needs sigma2 > 0");
    if (cfg.beta.size() != 2 || cfg.gamma.rows() != 2 || cfg.gamma.cols() != 2)
        throw ValidationError("coverage study model has two fixed and two random effects");
    if (cfg.modes.empty()) throw ValidationError("coverage study needs at least one FIM mode");
    for (auto m : cfg.modes)
        if (m == FimChoice::Kind::file) throw ValidationError("coverage study supports extract and compute modes");

    const LmmSpec spec(parse_terms("1 + t"), parse_terms("1 + t"), CovarianceLayout::full(2));
    ParamVector truth{cfg.beta, {cfg.gamma}, cfg.sigma2};
    truth.validate(spec.b(), spec.layout);
    const Dataset design = coverage_design(cfg.n, cfg.timepoints);
    const VectorXd theta = truth.flatten();
    const int q = spec.q();
    const auto nm = cfg.modes.size();

    // covered[r][m][j]: -1 when the repetition failed for that mode.
    std::vector<std::vector<std::vector<int>>> covered(static_cast<std::size_t>(cfg.R),
                                                       std::vector<std::vector<int>>(nm));
    parallel_for(static_cast<std::size_t>(cfg.R), cfg.workers, [&](std::size_t r) {
        const std::uint64_t rep = mix_seed(cfg.seed, r);
        const Dataset sim = simulate(spec, truth, design, rep);
        FitOptions fo;
        fo.seed = rep;
        std::optional<FitResult> fit;
        try {
            fit = fit_ml(spec, sim, std::nullopt, fo);
            if (!fit->converged) fit.reset();
        } catch (const NumericalError&) {
            fit.reset();
        }
        for (std::size_t m = 0; m < nm; ++m) {
            auto& out = covered[r][m];
            if (!fit) continue;
            try {
                const MatrixXd V = cfg.modes[m] == FimChoice::Kind::compute
                                       ? to_V(bootstrap_fim(*fit, sim, cfg.B, mix_seed(rep, 1), 1))
                                       : to_V(extract_fim(*fit, sim));
                const VectorXd est = fit->theta_hat.flatten();
                for (int j = 0; j < q; ++j) {
                    const double half = 1.959963984540054 * std::sqrt(V(j, j));
                    out.push_back(std::abs(est(j) - theta(j)) <= half ? 1 : 0);
                }
            } catch (const NumericalError&) {
                out.clear();
            }
        }
    });

    CoverageTable table;
    table.R = cfg.R;
    table.B = cfg.B;
    table.truth = theta;
    table.parameters = parameter_names({"(Intercept)", "t"}, {"(Intercept)", "t"}, spec.layout);
    for (auto m : cfg.modes) table.modes.push_back(m == FimChoice::Kind::compute ? "bootstrap" : "extracted");
    table.coverage = MatrixXd::Zero(q, static_cast<Eigen::Index>(nm));
    table.failures.assign(nm, 0);
    for (std::size_t m = 0; m < nm; ++m) {
        int ok = 0;
        for (int r = 0; r < cfg.R; ++r) {
            const auto& c = covered[static_cast<std::size_t>(r)][m];
            if (c.empty()) {
                ++table.failures[m];
                continue;
            }
            ++ok;
            for (int j = 0; j < q; ++j) table.coverage(j, static_cast<Eigen::Index>(m)) += c[static_cast<std::size_t>(j)];
        }
        if (table.failures[m] * 10 > cfg.R)
            throw EstimationError("coverage study: " + std::to_string(table.failures[m]) + " of " +
                                  std::to_string(cfg.R) + " repetitions failed for mode " + table.modes[m]);
        if (ok > 0) table.coverage.col(static_cast<Eigen::Index>(m)) /= ok;
    }
    return table;
}

}  // namespace conetest
