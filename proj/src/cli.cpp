#include "conetest/cli.hpp"

#include "conetest/data.hpp"
#include "conetest/errors.hpp"
#include "conetest/report.hpp"

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <set>

namespace conetest::cli {

namespace {

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    return out;
}

long long parse_integer(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    std::size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(t, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (t.empty() || used != t.size()) throw ConfigError(key + ": '" + text + "' is not an integer");
    return v;
}

std::uint64_t parse_seed(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError(key + ": '" + text + "' is not a non-negative integer seed");
    try {
        return std::stoull(t);
    } catch (const std::exception&) {
        throw ConfigError(key + ": seed '" + text + "' is out of range");
    }
}

bool parse_bool(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw ConfigError(key + ": '" + text + "' is not a boolean");
}

std::vector<int> parse_block_list(const std::string& text) {
    std::string t = trim(text);
    if (!t.empty() && t.front() == '[') t.erase(0, 1);
    if (!t.empty() && t.back() == ']') t.pop_back();
    std::vector<int> out;
    for (const auto& part : split(t, ',')) {
        const long long v = parse_integer("blocks", part);
        if (v < 1) throw ConfigError("blocks: block sizes must be positive");
        out.push_back(static_cast<int>(v));
    }
    return out;
}

Format parse_format(const std::string& text) {
    if (text == "text") return Format::text;
    if (text == "json") return Format::json;
    throw ConfigError("format must be text or json (got '" + text + "')");
}

void set_option(RunConfig& cfg, const std::string& key, const std::string& value) {
    auto& o = cfg.options;
    if (key == "pval") {
        o.pval = pval_mode_from(trim(value));
    } else if (key == "fim") {
        o.fim = FimChoice::from(trim(value));
    } else if (key == "fim_is_inverse") {
        o.fim.is_inverse = parse_bool(key, value);
    } else if (key == "M") {
        const long long v = parse_integer(key, value);
        if (v < 1 || v > 100000000) throw ValidationError("M must be a positive integer");
        o.M = static_cast<int>(v);
    } else if (key == "B") {
        const long long v = parse_integer(key, value);
        if (v < 50 || v > 1000000) throw ValidationError("B must be an integer of at least 50");
        o.B = static_cast<int>(v);
    } else if (key == "seed") {
        o.seed = parse_seed(key, value);
    } else if (key == "workers") {
        const long long v = parse_integer(key, value);
        if (v < 1 || v > 1024) throw ValidationError("workers must be a positive integer");
        o.workers = static_cast<int>(v);
    } else if (key == "format") {
        cfg.format = parse_format(trim(value));
    }
}

}  // namespace

RunConfig parse_config(const std::filesystem::path& path) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_ini(path.string(), tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError("cannot read config: " + std::string(e.what()));
    }
    RunConfig cfg;
    std::vector<std::string> unknown;
    const std::set<std::string> top = {"data", "group", "response", "categorical"};
    const std::set<std::string> model = {"fixed", "random", "gamma", "blocks"};
    const std::set<std::string> options = {"pval", "fim", "fim_is_inverse", "M", "B", "seed", "workers", "format"};
    bool seen_h1 = false, seen_h0 = false;

    auto read_model = [&](const pt::ptree& sec, const std::string& name, ModelFormulas& m) {
        bool has_gamma = false;
        for (const auto& [key, node] : sec) {
            if (!model.count(key)) {
                unknown.push_back(name + "." + key);
                continue;
            }
            const std::string value = trim(node.get_value<std::string>());
            if (key == "fixed") m.fixed = value;
            if (key == "random") m.random = value;
            if (key == "gamma") {
                if (value != "full" && value != "diag")
                    throw ConfigError(name + ".gamma must be full or diag (got '" + value + "')");
                m.gamma = value;
                has_gamma = true;
            }
            if (key == "blocks") m.blocks = parse_block_list(value);
        }
        if (has_gamma && !m.blocks.empty()) throw ConfigError(name + ": give either gamma or blocks, not both");
        if (!sec.get_child_optional("fixed")) throw ConfigError(name + ".fixed is required");
    };

    for (const auto& [key, node] : tree) {
        if (!node.empty()) {
            if (key == "h1") {
                read_model(node, key, cfg.h1);
                seen_h1 = true;
            } else if (key == "h0") {
                read_model(node, key, cfg.h0);
                seen_h0 = true;
            } else if (key == "options") {
                for (const auto& [okey, onode] : node) {
                    if (!options.count(okey)) {
                        unknown.push_back("options." + okey);
                        continue;
                    }
                    set_option(cfg, okey, onode.get_value<std::string>());
                }
            } else {
                unknown.push_back("[" + key + "]");
            }
            continue;
        }
        if (!top.count(key)) {
            unknown.push_back(key);
            continue;
        }
        const std::string value = trim(node.get_value<std::string>());
        if (key == "data") cfg.data = value;
        if (key == "group") cfg.group = value;
        if (key == "response") cfg.response = value;
        if (key == "categorical") {
            for (const auto& item : split(value, ',')) {
                if (item.empty()) continue;
                const auto colon = item.find(':');
                if (colon == std::string::npos)
                    throw ConfigError("categorical entries must read column:reference (got '" + item + "')");
                cfg.categorical[trim(item.substr(0, colon))] = trim(item.substr(colon + 1));
            }
        }
    }
    if (!unknown.empty()) {
        std::string list;
        for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
        throw ConfigError(path.string() + ": unknown key(s) " + list);
    }
    if (!seen_h1 || !seen_h0) throw ConfigError(path.string() + ": both [h1] and [h0] sections are required");
    if (cfg.response.empty()) throw ConfigError(path.string() + ": response is required");
    if (!cfg.data.empty() && cfg.data.is_relative()) cfg.data = path.parent_path() / cfg.data;
    return cfg;
}

LmmSpec model_spec(const ModelFormulas& m, std::string* group) {
    std::string random = m.random;
    const auto bar = random.find('|');
    if (bar != std::string::npos) {
        if (group) *group = trim(random.substr(bar + 1));
        random = random.substr(0, bar);
    }
    const auto fixed_terms = parse_terms(m.fixed);
    const auto random_terms = parse_terms(random);
    const int p = static_cast<int>(random_terms.size());
    CovarianceLayout layout;
    if (!m.blocks.empty()) {
        layout.blocks = m.blocks;
        if (layout.dimension() != p)
            throw ConfigError("blocks sum to " + std::to_string(layout.dimension()) + " but there are " +
                              std::to_string(p) + " random effects");
    } else {
        layout = m.gamma == "diag" ? CovarianceLayout::diagonal(p) : CovarianceLayout::full(p);
    }
    return LmmSpec(fixed_terms, random_terms, layout);
}

namespace {

struct Flags {
    std::string config, data, m1, m0, pval, fim, format, seed, modes;
    bool fim_is_inverse = false;
    int M = 0, B = 0, workers = 0, R = 0, n = 0, timepoints = 0;
};

void add_common(CLI::App* sub, Flags& f) {
    sub->add_option("--pval", f.pval, "p-value computation: bounds, approx or both");
    sub->add_option("--fim", f.fim, "information matrix: extract, compute or a file path");
    sub->add_flag("--fim-is-inverse", f.fim_is_inverse, "the --fim file holds the inverse information");
    sub->add_option("--M", f.M, "Monte Carlo sample size");
    sub->add_option("--B", f.B, "bootstrap sample size");
    sub->add_option("--seed", f.seed, "random seed (default: CONETEST_SEED or 0)");
    sub->add_option("--workers", f.workers, "worker threads");
    sub->add_option("--format", f.format, "report format: text or json");
}

void apply_flags(const CLI::App* sub, const Flags& f, RunConfig& cfg) {
    if (sub->count("--pval")) set_option(cfg, "pval", f.pval);
    if (sub->count("--fim")) {
        const bool inverse = cfg.options.fim.is_inverse;
        set_option(cfg, "fim", f.fim);
        cfg.options.fim.is_inverse = inverse;
    }
    if (f.fim_is_inverse) cfg.options.fim.is_inverse = true;
    if (sub->count("--M")) set_option(cfg, "M", std::to_string(f.M));
    if (sub->count("--B")) set_option(cfg, "B", std::to_string(f.B));
    if (sub->count("--workers")) set_option(cfg, "workers", std::to_string(f.workers));
    if (sub->count("--format")) set_option(cfg, "format", f.format);
}

std::uint64_t resolve_seed(const CLI::App* sub, const Flags& f, const std::optional<std::uint64_t>& config_seed) {
    if (sub->count("--seed")) return parse_seed("--seed", f.seed);
    if (config_seed) return *config_seed;
    if (const char* env = std::getenv("CONETEST_SEED")) return parse_seed("CONETEST_SEED", env);
    return 0;
}

std::optional<std::uint64_t> config_seed(const std::filesystem::path& path) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    pt::read_ini(path.string(), tree);
    if (auto v = tree.get_optional<std::string>("options.seed")) return parse_seed("options.seed", *v);
    return std::nullopt;
}

void emit(std::ostream& out, Format format, const std::string& text, const std::string& json) {
    out << (format == Format::json ? json : text);
}

int run_test(const RunConfig& cfg, std::ostream& out) {
    std::string g1, g0;
    const LmmSpec s1 = model_spec(cfg.h1, &g1);
    const LmmSpec s0 = model_spec(cfg.h0, &g0);
    std::string group = cfg.group;
    for (const std::string& g : {g1, g0}) {
        if (g.empty()) continue;
        if (group.empty()) group = g;
        if (g != group) throw ConfigError("grouping column '" + g + "' differs from '" + group + "'");
    }
    if (group.empty()) throw ConfigError("no grouping column: set group or write random = ... | group");
    if (cfg.data.empty()) throw ConfigError("no data file given");

    ColumnRoles roles;
    roles.group = group;
    roles.response = cfg.response;
    roles.categorical = cfg.categorical;
    std::set<std::string> cols;
    for (const auto* spec : {&s1, &s0})
        for (const auto* terms : {&spec->fixed_terms, &spec->random_terms})
            for (const auto& c : referenced_columns(*terms)) cols.insert(c);
    for (const auto& [c, ref] : cfg.categorical) cols.insert(c);
    roles.covariates.assign(cols.begin(), cols.end());
    const Dataset ds = load_csv(cfg.data, roles);

    FitOptions fo;
    fo.seed = cfg.options.seed;
    const FitResult f1 = fit_ml(s1, ds, std::nullopt, fo);
    const FitResult f0 = fit_ml(s0, ds, std::nullopt, fo);
    const TestResult r = var_comp_test(f1, f0, ds, cfg.options);
    emit(out, cfg.format, text_report(r), json_report(r));
    return 0;
}

int run_weights(const RunConfig& cfg, std::ostream& out) {
    const FitSummary s = parse_fit_summary(cfg.m1);
    if (!s.structure) throw SchemaError(cfg.m1.string() + ": the summary must describe the test (fixed, blocks)");
    const TestStructure& ts = *s.structure;
    ts.validate();
    const ConeDims dims = cone_dims(ts);
    const Cone cone = Cone::from_structure(ts);
    if (auto exact = exact_weights(cone, dims)) {
        emit(out, cfg.format, text_report(dims, *exact), json_report(dims, *exact));
        return 0;
    }
    Eigen::MatrixXd V;
    switch (cfg.options.fim.kind) {
        case FimChoice::Kind::file: V = to_V(load_fim(cfg.options.fim.path, ts.q(), cfg.options.fim.is_inverse)); break;
        case FimChoice::Kind::extract:
            if (!s.fim) throw FimInputError(cfg.m1.string() + ": no 'fim' field; pass --fim <file>");
            V = to_V(make_fim(*s.fim, FimKind::extracted, s.fim_is_inverse));
            break;
        case FimChoice::Kind::compute:
            throw FimInputError("bootstrap information needs a fitted model; fit summaries cannot be refitted");
    }
    if (cfg.options.M < 100 * dims.n_weights)
        throw ValidationError("M must be at least " + std::to_string(100 * dims.n_weights));
    const ChiBarSample sample = draw_sample(cone, V, cfg.options.M, cfg.options.seed, cfg.options.workers);
    const WeightEstimate w = estimate_weights(sample, dims);
    emit(out, cfg.format, text_report(dims, w), json_report(dims, w));
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Likelihood ratio tests of variance components with chi-bar-square limits", "conetest"};
    app.require_subcommand(1);
    Flags f;

    auto* test = app.add_subcommand("test", "fit two nested linear mixed models and test");
    test->add_option("--config", f.config, "INI configuration")->required();
    test->add_option("--data", f.data, "CSV data file (overrides the config)");
    add_common(test, f);

    auto* summary = app.add_subcommand("test-summary", "test from two fit summaries");
    summary->add_option("--m1", f.m1, "alternative model summary (JSON)")->required();
    summary->add_option("--m0", f.m0, "null model summary (JSON)")->required();
    add_common(summary, f);

    auto* weights = app.add_subcommand("weights", "chi-bar-square weights for a test structure");
    weights->add_option("--m1", f.m1, "summary describing the test structure (JSON)")->required();
    add_common(weights, f);

    auto* coverage = app.add_subcommand("coverage", "confidence-interval coverage study");
    coverage->add_option("--R", f.R, "repetitions");
    coverage->add_option("--n", f.n, "individuals per dataset");
    coverage->add_option("--timepoints", f.timepoints, "observations per individual");
    coverage->add_option("--modes", f.modes, "comma-separated FIM modes: compute, extract");
    add_common(coverage, f);

    std::vector<const char*> argv{"conetest"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg;
        CLI::App* sub = nullptr;
        std::optional<std::uint64_t> file_seed;
        if (test->parsed()) {
            sub = test;
            cfg = parse_config(f.config);
            file_seed = config_seed(f.config);
            if (test->count("--data")) cfg.data = f.data;
            cfg.subcommand = Subcommand::test;
        } else if (summary->parsed()) {
            sub = summary;
            cfg.subcommand = Subcommand::test_summary;
            cfg.m1 = f.m1;
            cfg.m0 = f.m0;
        } else if (weights->parsed()) {
            sub = weights;
            cfg.subcommand = Subcommand::weights;
            cfg.m1 = f.m1;
        } else {
            sub = coverage;
            cfg.subcommand = Subcommand::coverage;
        }
        apply_flags(sub, f, cfg);
        cfg.options.seed = resolve_seed(sub, f, file_seed);

        switch (cfg.subcommand) {
            case Subcommand::test: return run_test(cfg, out);
            case Subcommand::test_summary: {
                const TestResult r =
                    var_comp_test(parse_fit_summary(cfg.m1), parse_fit_summary(cfg.m0), cfg.options);
                emit(out, cfg.format, text_report(r), json_report(r));
                return 0;
            }
            case Subcommand::weights: return run_weights(cfg, out);
            case Subcommand::coverage: {
                CoverageConfig cc;
                if (coverage->count("--R")) cc.R = f.R;
                if (coverage->count("--n")) cc.n = f.n;
                if (coverage->count("--timepoints")) cc.timepoints = f.timepoints;
                if (coverage->count("--B")) cc.B = cfg.options.B;
                if (coverage->count("--modes")) {
                    cc.modes.clear();
                    for (const auto& m : split(f.modes, ',')) {
                        if (m == "compute") cc.modes.push_back(FimChoice::Kind::compute);
                        else if (m == "extract") cc.modes.push_back(FimChoice::Kind::extract);
                        else throw ConfigError("--modes accepts compute and extract (got '" + m + "')");
                    }
                }
                cc.seed = cfg.options.seed;
                cc.workers = cfg.options.workers;
                const CoverageTable t = run_coverage_study(cc);
                emit(out, cfg.format, text_report(t), json_report(t));
                return 0;
            }
        }
    } catch (const InputError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const boost::property_tree::ptree_error& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "numerical failure: " << e.what() << "\n";
        return 3;
    }
    return 0;
}

}  // namespace conetest::cli
