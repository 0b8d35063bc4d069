#include <gtest/gtest.h>

#include "moon/gradcheck_suite.hpp"

using namespace moon;

namespace {

std::vector<std::pair<std::string, std::size_t>> all_cases() {
  std::vector<std::pair<std::string, std::size_t>> out;
  for (const auto& scope : gradcheck_scopes())
    for (std::size_t i = 0; i < gradcheck_cases(scope).size(); ++i) out.emplace_back(scope, i);
  return out;
}

}  // namespace

class SuiteCase : public ::testing::TestWithParam<std::pair<std::string, std::size_t>> {};

TEST_P(SuiteCase, PassesCentralDifferences) {
  const auto& [scope, index] = GetParam();
  const auto c = gradcheck_cases(scope).at(index);
  // the whole-model case is the slow one; the acceptance run does all 100 trials
  const auto r = run_grad_case(c, scope == "full" ? 10 : 100, 2024);
  EXPECT_TRUE(r.passed) << c.name << " " << r.max_relative_error;
  EXPECT_GT(r.coordinates, 0u);
}

INSTANTIATE_TEST_SUITE_P(Scopes, SuiteCase, ::testing::ValuesIn(all_cases()),
                         [](const ::testing::TestParamInfo<std::pair<std::string, std::size_t>>& info) {
                           std::string n = info.param.first + "_" + gradcheck_cases(info.param.first).at(info.param.second).name;
                           for (auto& ch : n)
                             if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                           return n;
                         });

TEST(GradSuite, CorruptedBackwardIsReported) {
  set_corrupt_backward_op("matmul");
  const auto rows = run_gradcheck("primitives", 3);
  set_corrupt_backward_op("");
  bool matmul_failed = false;
  for (const auto& r : rows)
    if (r.name == "matmul") matmul_failed = !r.passed;
  EXPECT_TRUE(matmul_failed);
  EXPECT_NE(gradcheck_table(rows).find("FAIL"), std::string::npos);
}

TEST(GradSuite, UnknownScope) { EXPECT_THROW(gradcheck_cases("everything"), ConfigError); }

TEST(GradSuite, DeterministicPerSeed) {
  const auto a = run_gradcheck("losses", 5, 7), b = run_gradcheck("losses", 5, 7);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].max_relative_error, b[i].max_relative_error);
}
