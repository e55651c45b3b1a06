#pragma once

#include "conetest/data.hpp"

#include <filesystem>
#include <string>

namespace testing {

inline std::filesystem::path source_path(const std::string& rel) {
    return std::filesystem::path(CONETEST_SOURCE_DIR) / rel;
}

inline conetest::Dataset orthodont() {
    conetest::ColumnRoles roles;
    roles.group = "Subject";
    roles.response = "distance";
    roles.covariates = {"Sex", "age"};
    roles.categorical = {{"Sex", "Male"}};
    return conetest::load_csv(source_path("data/orthodont.csv"), roles);
}

}  // namespace testing
