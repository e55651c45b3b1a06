#include "common.hpp"

#include "conetest/errors.hpp"

#include <doctest.h>

#include <sstream>

using namespace conetest;

TEST_CASE("orthodont loads 27 individuals with 4 visits each") {
    const Dataset ds = testing::orthodont();
    CHECK(ds.size() == 27);
    CHECK(ds.total_rows() == 108);
    for (const auto& ind : ds.individuals()) CHECK(ind.responses.size() == 4);
    CHECK(ds.categorical_columns().count("Sex") == 1);
}

TEST_CASE("single row file gives one individual with one observation") {
    std::istringstream in("id,y,x\nA,1.5,2\n");
    const Dataset ds = parse_csv(in, {"id", "y", {"x"}, {}});
    REQUIRE(ds.size() == 1);
    CHECK(ds.individual(0).responses.size() == 1);
    CHECK(ds.individual(0).responses(0) == 1.5);
}

TEST_CASE("non-numeric response names the row") {
    std::istringstream in("id,y\nA,1\nA,2\nB,oops\n");
    try {
        parse_csv(in, {"id", "y", {}, {}});
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.row() == 3);
        CHECK(std::string(e.what()).find("row 3") != std::string::npos);
    }
}

TEST_CASE("missing column and empty group are rejected") {
    std::istringstream a("id,y\nA,1\n");
    CHECK_THROWS_AS(parse_csv(a, {"id", "y", {"z"}, {}}), ConfigError);
    std::istringstream b("id,y\n,1\n");
    CHECK_THROWS_AS(parse_csv(b, {"id", "y", {}, {}}), ValidationError);
}

TEST_CASE("orthodont design matrices for the case 1 alternative") {
    const Dataset ds = testing::orthodont();
    const Design d = design_matrices(ds, parse_terms("1 + Sex + age + Sex:age"), parse_terms("1 + age"));
    REQUIRE(d.individuals.size() == 27);
    for (const auto& ind : d.individuals) {
        CHECK(ind.fixed.rows() == 4);
        CHECK(ind.fixed.cols() == 4);
        CHECK(ind.random.cols() == 2);
    }
    CHECK(d.fixed_columns.size() == 4);
}

TEST_CASE("intercept-only terms are columns of ones") {
    const Dataset ds = testing::orthodont();
    const Design d = design_matrices(ds, parse_terms("1"), parse_terms("1"));
    for (const auto& ind : d.individuals) {
        CHECK(ind.fixed.cols() == 1);
        CHECK(ind.fixed.isOnes());
        CHECK(ind.random.isOnes());
    }
}

TEST_CASE("interaction of two indicators is the elementwise product") {
    std::istringstream in("id,y,a,b\nA,1,u,p\nA,2,v,p\nA,3,v,q\n");
    const Dataset ds = parse_csv(in, {"id", "y", {"a", "b"}, {{"a", "u"}, {"b", "p"}}});
    const Design d = design_matrices(ds, parse_terms("1 + a + b + a:b"), parse_terms("0"));
    const Eigen::MatrixXd& X = d.individuals[0].fixed;
    REQUIRE(X.cols() == 4);
    // a = (0,1,1), b = (0,0,1) by hand
    const Eigen::Vector3d a(0, 1, 1), b(0, 0, 1), ab(0, 0, 1);
    CHECK(X.col(1).isApprox(a));
    CHECK(X.col(2).isApprox(b));
    CHECK(X.col(3) == ab);
    CHECK(d.individuals[0].random.cols() == 0);
}

TEST_CASE("unknown column in a formula") {
    const Dataset ds = testing::orthodont();
    CHECK_THROWS_AS(design_matrices(ds, parse_terms("1 + height"), parse_terms("1")), ConfigError);
}

TEST_CASE("formula parsing") {
    const auto terms = parse_terms("1 + Sex + age + Sex:age");
    REQUIRE(terms.size() == 4);
    CHECK(terms[0].is_intercept());
    CHECK(terms[3].factors == std::vector<std::string>{"Sex", "age"});
    CHECK(parse_terms("0").empty());
    CHECK(referenced_columns(terms) == std::vector<std::string>{"Sex", "age"});
}
