#include "common.hpp"

#include "conetest/cli.hpp"
#include "conetest/errors.hpp"
#include "conetest/report.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace conetest;
using nlohmann::json;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string config(const std::string& name) { return testing::source_path("configs/" + name).string(); }
std::string data(const std::string& name) { return testing::source_path("data/" + name).string(); }

std::filesystem::path write_temp(const std::string& name, const std::string& text) {
    const auto dir = std::filesystem::temp_directory_path() / "conetest_cli_tests";
    std::filesystem::create_directories(dir);
    const auto path = dir / name;
    std::ofstream(path) << text;
    return path;
}

const std::string minimal_config = "data = " + testing::source_path("data/orthodont.csv").string() + R"(
response = distance
categorical = Sex:Male

[h1]
fixed = 1 + Sex + age + Sex:age
random = 1 + age | Subject

[h0]
fixed = 1 + Sex + age + Sex:age
random = 1 | Subject
)";

}  // namespace

TEST_CASE("test subcommand on orthodont case 1") {
    const Run r = run({"test", "--config", config("orthodont_case1.ini")});
    CHECK(r.code == 0);
    CHECK(r.out.rfind("Variance components testing in mixed effects models\n", 0) == 0);
    CHECK(r.out.find("Testing that variance of age is null") != std::string::npos);
    CHECK(r.out.find("\tLRT =  0.8326") != std::string::npos);
    CHECK(r.out.find("with degrees of freedom 1 2\n") != std::string::npos);
}

TEST_CASE("test-summary on the bundled cbpp summary") {
    const Run r = run({"test-summary", "--m1", data("cbpp_m1.json"), "--m0", data("cbpp_m0.json")});
    CHECK(r.code == 0);
    CHECK(r.out.find("lower  9.114967e-05 upper  9.114967e-05") != std::string::npos);
}

TEST_CASE("weights subcommand with an identity information matrix") {
    const Run r = run({"weights", "--m1", testing::source_path("tests/data/two_blocks.json").string(), "--fim",
                       testing::source_path("tests/data/identity4.txt").string(), "--M", "50000", "--format", "json"});
    REQUIRE(r.code == 0);
    const json j = json::parse(r.out);
    const auto w = j.at("weights").at("weights").get<std::vector<double>>();
    const auto sd = j.at("weights").at("sd").get<std::vector<double>>();
    const std::vector<double> truth{0.25, 0.5, 0.25};
    REQUIRE(w.size() == 3);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(w[k] - truth[k]) <= 3 * sd[k] + 1e-12);
}

TEST_CASE("config defaults and overrides") {
    const auto path = write_temp("minimal.ini", minimal_config);
    const cli::RunConfig cfg = cli::parse_config(path);
    CHECK(cfg.options.M == 5000);
    CHECK(cfg.options.B == 1000);
    CHECK(cfg.options.pval == PvalMode::bounds);
    CHECK(cfg.options.fim.kind == FimChoice::Kind::extract);
    CHECK(cfg.h1.random == "1 + age | Subject");
    CHECK(cfg.categorical.at("Sex") == "Male");

    const auto approx = write_temp("approx.ini", minimal_config + "\n[options]\npval = approx\nfim = compute\n");
    const cli::RunConfig a = cli::parse_config(approx);
    CHECK(a.options.pval == PvalMode::approx);
    CHECK(a.options.fim.kind == FimChoice::Kind::compute);

    const auto zero = write_temp("zero.ini", minimal_config + "\n[options]\nM = 0\n");
    CHECK_THROWS_AS(cli::parse_config(zero), ValidationError);
}

TEST_CASE("unknown config keys are listed") {
    const auto path = write_temp("unknown.ini", minimal_config + "\n[options]\nalpha = 0.05\n[extra]\nx = 1\n");
    try {
        cli::parse_config(path);
        FAIL("expected a configuration error");
    } catch (const ConfigError& e) {
        const std::string what = e.what();
        CHECK(what.find("options.alpha") != std::string::npos);
        CHECK(what.find("[extra]") != std::string::npos);
    }
}

TEST_CASE("gamma and blocks are exclusive") {
    const auto path = write_temp("both.ini", minimal_config + "gamma = diag\nblocks = [1,1]\n");
    CHECK_THROWS_AS(cli::parse_config(path), ConfigError);
    cli::ModelFormulas m{"1", "1 + age | Subject", "full", {1, 1}};
    std::string group;
    const LmmSpec s = cli::model_spec(m, &group);
    CHECK(group == "Subject");
    CHECK(s.layout.blocks == std::vector<int>{1, 1});
    m.blocks = {3};
    CHECK_THROWS_AS(cli::model_spec(m), ConfigError);
}

TEST_CASE("exit codes") {
    CHECK(run({}).code == 2);
    CHECK(run({"test"}).code == 2);
    CHECK(run({"test", "--config", config("orthodont_case1.ini"), "--pval", "sometimes"}).code == 2);
    CHECK(run({"test", "--config", "/nonexistent.ini"}).code == 2);
    CHECK(run({"--help"}).code == 0);
    const auto m1 = write_temp("low_m1.json", R"({"loglik": -10, "fixed": {"count": 1}, "blocks": [{"size": 1, "test": "full"}]})");
    const auto m0 = write_temp("low_m0.json", R"({"loglik": -5})");
    const Run r = run({"test-summary", "--m1", m1.string(), "--m0", m0.string()});
    CHECK(r.code == 3);
    CHECK(r.err.find("negative") != std::string::npos);
}

TEST_CASE("text and JSON reports agree") {
    const std::vector<std::string> base{"test", "--config", config("orthodont_case3.ini"), "--pval", "both"};
    const Run text = run(base);
    std::vector<std::string> as_json = base;
    as_json.insert(as_json.end(), {"--format", "json"});
    const Run js = run(as_json);
    REQUIRE(text.code == 0);
    REQUIRE(js.code == 0);
    const json j = json::parse(js.out);
    for (const char* key : {"lower_bound", "upper_bound", "from_weights"})
        CHECK(text.out.find(format7(j.at("pvalues").at(key).get<double>())) != std::string::npos);
    CHECK(text.out.find("LRT =  " + format7(j.at("lrt").get<double>())) != std::string::npos);
    for (double w : j.at("weights").at("weights").get<std::vector<double>>())
        CHECK(text.out.find(format7(w)) != std::string::npos);
}

TEST_CASE("reports are byte-identical across runs and worker counts") {
    const std::vector<std::string> base{"test", "--config", config("orthodont_case3.ini"), "--pval", "both",
                                        "--seed", "99", "--format", "json"};
    const Run a = run(base);
    const Run b = run(base);
    std::vector<std::string> four = base;
    four.insert(four.end(), {"--workers", "4"});
    const Run c = run(four);
    CHECK(a.out == b.out);
    CHECK(a.out == c.out);
    CHECK(json::parse(a.out).at("seed") == 99);
}

TEST_CASE("seed comes from the flag, then the config, then the environment") {
    const auto path = write_temp("seeded.ini", minimal_config + "\n[options]\nseed = 5\n");
    const std::vector<std::string> base{"test", "--config", path.string(), "--format", "json"};
    ::setenv("CONETEST_SEED", "7", 1);
    CHECK(json::parse(run(base).out).at("seed") == 5);
    std::vector<std::string> flagged = base;
    flagged.insert(flagged.end(), {"--seed", "3"});
    CHECK(json::parse(run(flagged).out).at("seed") == 3);
    const Run env = run({"test", "--config", config("orthodont_case1.ini"), "--format", "json"});
    CHECK(json::parse(env.out).at("seed") == 7);
    ::setenv("CONETEST_SEED", "seven", 1);
    CHECK(run({"test", "--config", config("orthodont_case1.ini")}).code == 2);
    ::unsetenv("CONETEST_SEED");
}
