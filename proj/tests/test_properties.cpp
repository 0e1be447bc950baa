#include <gtest/gtest.h>

#include "properties.hpp"

namespace {

class Invariant : public ::testing::TestWithParam<props::Property> {};

TEST_P(Invariant, Holds) {
  const auto outcome = GetParam().check();
  EXPECT_TRUE(outcome.ok) << GetParam().module << '/' << GetParam().name << ": " << outcome.detail;
}

std::string param_name(const ::testing::TestParamInfo<props::Property>& info) {
  std::string s = info.param.module + "_" + info.param.name;
  for (auto& ch : s)
    if (ch == '-') ch = '_';
  return s;
}

INSTANTIATE_TEST_SUITE_P(Properties, Invariant, ::testing::ValuesIn(props::registry()), param_name);

}  // namespace
