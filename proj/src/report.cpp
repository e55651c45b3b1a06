#include "conetest/report.hpp"

#include <json.hpp>

#include <cstdio>
#include <sstream>

namespace conetest {

using json = nlohmann::json;

std::string format7(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.7g", x);
    return buf;
}

namespace {

std::string df_line(const ConeDims& d) {
    std::string s = "\tmixture of " + std::to_string(d.n_weights) +
                    " chi-bar-square distributions with degrees of freedom";
    for (int df = d.d1; df <= d.df_max; ++df) s += " " + std::to_string(df);
    return s + "\n";
}

std::string weights_line(const WeightEstimate& w) {
    std::string s = "\tassociated weights (and sd):";
    for (Eigen::Index j = 0; j < w.weights.size(); ++j) s += " " + format7(w.weights(j)) + " (" + format7(w.sd(j)) + ")";
    return s + "\n";
}

json vec(const Eigen::VectorXd& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

json mat(const Eigen::MatrixXd& m) {
    json a = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(vec(m.row(i).transpose()));
    return a;
}

json dims_json(const ConeDims& d) {
    return {{"q", d.q}, {"a", d.a}, {"d1", d.d1}, {"df_max", d.df_max}, {"n_weights", d.n_weights}};
}

json weights_json(const WeightEstimate& w) {
    return {{"dfs", w.dfs},
            {"weights", vec(w.weights)},
            {"sd", vec(w.sd)},
            {"exact", w.exact},
            {"thresholds", w.thresholds},
            {"covariance", mat(w.covariance)},
            {"warnings", w.warnings}};
}

json structure_json(const TestStructure& ts) {
    json blocks = json::array();
    for (std::size_t k = 0; k < ts.layout.blocks.size(); ++k) {
        const BlockTest& bt = ts.block_tests[k];
        json b = {{"size", ts.layout.blocks[k]}, {"test", to_string(bt.kind)}};
        if (bt.kind == BlockTestKind::covariances_only) {
            b["t"] = bt.t;
            json pairs = json::array();
            for (const auto& [r, c] : ts.tested_pairs(k)) pairs.push_back({r, c});
            b["pairs"] = pairs;
        }
        if (bt.kind == BlockTestKind::subblock) b["s"] = bt.s;
        blocks.push_back(b);
    }
    json out = {{"fixed", {{"count", ts.b}, {"tested_indices", ts.tested_fixed}}},
                {"blocks", blocks},
                {"residual_param_count", ts.residual_param_count}};
    if (!ts.fixed_names.empty()) out["fixed"]["names"] = ts.fixed_names;
    if (!ts.random_names.empty()) out["random_names"] = ts.random_names;
    return out;
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::string text_report(const TestResult& r) {
    std::ostringstream os;
    os << "Variance components testing in mixed effects models\n";
    os << r.null_description << "\n\n";
    os << " Likelihood ratio test statistic:\n";
    os << "\tLRT =  " << format7(r.lrt) << "\n\n";
    os << " Limiting distribution:\n";
    os << df_line(r.dims);
    if (r.weights) os << weights_line(*r.weights);
    os << "\n p-value of the test:\n";
    if (r.pvalues.from_weights) os << "\tfrom estimated weights: " << format7(*r.pvalues.from_weights) << "\n";
    if (r.pvalues.from_sample) os << "\tfrom Monte Carlo sample: " << format7(*r.pvalues.from_sample) << "\n";
    os << "\tbounds on p-value: lower  " << format7(r.pvalues.lower_bound) << " upper  "
       << format7(r.pvalues.upper_bound) << "\n";
    if (!r.warnings.empty()) {
        os << "\n Warnings:\n";
        for (const auto& w : r.warnings) os << "\t" << w << "\n";
    }
    return os.str();
}

std::string json_report(const TestResult& r) {
    json j;
    j["lrt"] = r.lrt;
    j["dims"] = dims_json(r.dims);
    j["structure"] = structure_json(r.structure);
    j["null_description"] = r.null_description;
    j["alternative_description"] = r.alternative_description;
    j["weights"] = r.weights ? weights_json(*r.weights) : json(nullptr);
    j["pvalues"] = {{"from_weights", optional_number(r.pvalues.from_weights)},
                    {"from_sample", optional_number(r.pvalues.from_sample)},
                    {"lower_bound", r.pvalues.lower_bound},
                    {"upper_bound", r.pvalues.upper_bound}};
    j["fim_kind"] = r.fim_kind ? json(to_string(*r.fim_kind)) : json(nullptr);
    j["V"] = r.V ? mat(*r.V) : json(nullptr);
    j["M"] = r.M;
    j["seed"] = r.seed;
    j["warnings"] = r.warnings;
    return j.dump(2) + "\n";
}

std::string text_report(const ConeDims& dims, const WeightEstimate& w) {
    std::ostringstream os;
    os << "Chi-bar-square mixture weights\n";
    os << df_line(dims) << weights_line(w);
    for (const auto& msg : w.warnings) os << "\twarning: " << msg << "\n";
    return os.str();
}

std::string json_report(const ConeDims& dims, const WeightEstimate& w) {
    json j = {{"dims", dims_json(dims)}, {"weights", weights_json(w)}};
    return j.dump(2) + "\n";
}

std::string text_report(const CoverageTable& t) {
    std::ostringstream os;
    os << "Empirical coverage of nominal 95% confidence intervals (R = " << t.R << ", B = " << t.B << ")\n";
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-32s %10s", "parameter", "truth");
    os << buf;
    for (const auto& m : t.modes) {
        std::snprintf(buf, sizeof buf, " %10s", m.c_str());
        os << buf;
    }
    os << "\n";
    for (std::size_t i = 0; i < t.parameters.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%-32s %10s", t.parameters[i].c_str(),
                      format7(t.truth(static_cast<Eigen::Index>(i))).c_str());
        os << buf;
        for (Eigen::Index m = 0; m < t.coverage.cols(); ++m) {
            std::snprintf(buf, sizeof buf, " %10.3f", t.coverage(static_cast<Eigen::Index>(i), m));
            os << buf;
        }
        os << "\n";
    }
    os << "failed repetitions:";
    for (std::size_t m = 0; m < t.modes.size(); ++m) os << " " << t.modes[m] << "=" << t.failures[m];
    os << "\n";
    return os.str();
}

std::string json_report(const CoverageTable& t) {
    json cov = json::object();
    for (std::size_t m = 0; m < t.modes.size(); ++m)
        cov[t.modes[m]] = vec(t.coverage.col(static_cast<Eigen::Index>(m)));
    json j = {{"R", t.R},          {"B", t.B},         {"parameters", t.parameters}, {"truth", vec(t.truth)},
              {"coverage", cov}, {"failures", t.failures}};
    return j.dump(2) + "\n";
}

}  // namespace conetest
