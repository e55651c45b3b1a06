#pragma once

#include "conetest/chibarsq.hpp"
#include "conetest/engine.hpp"

#include <string>

namespace conetest {

/// Number with 7 significant digits, as in "%.7g".
std::string format7(double x);

std::string text_report(const TestResult& r);
std::string json_report(const TestResult& r);

std::string text_report(const ConeDims& dims, const WeightEstimate& w);
std::string json_report(const ConeDims& dims, const WeightEstimate& w);

std::string text_report(const CoverageTable& t);
std::string json_report(const CoverageTable& t);

}  // namespace conetest
