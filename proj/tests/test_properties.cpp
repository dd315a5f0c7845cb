#include <gtest/gtest.h>

#include "properties.hpp"

namespace {

class Invariant : public ::testing::TestWithParam<properties::Property> {};

TEST_P(Invariant, HoldsOnRandomCases) {
  const auto outcome = properties::run(GetParam());
  EXPECT_GE(outcome.cases, properties::kMinCases);
  EXPECT_EQ(outcome.failures, 0u) << outcome.first_failure;
}

INSTANTIATE_TEST_SUITE_P(All, Invariant, ::testing::ValuesIn(properties::all_properties()),
                         [](const auto& info) { return info.param.name; });

}  // namespace
