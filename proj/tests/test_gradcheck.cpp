#include <gtest/gtest.h>

#include <set>

#include "esf/gradcheck.hpp"
#include "esf/ops.hpp"
#include "helpers.hpp"

using namespace esf;

namespace {

void expect_all_pass(const std::vector<GradCheckResult>& results) {
  ASSERT_FALSE(results.empty());
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed) << r.name << " max_rel_err=" << r.max_rel_error << " at " << r.worst;
    EXPECT_GT(r.entries, 0u) << r.name;
  }
}

}  // namespace

TEST(RelativeError, Floor) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0, 1e-3), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0, 1e-3), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(1e-6, 0.0, 1e-3), 1e-3);
}

TEST(CheckGradient, CatchesWrongGradient) {
  const Objective cube = [](const std::vector<Tensor<double>>& in, std::vector<Tensor<double>>* g) {
    double s = 0;
    for (double v : in[0].values()) s += v * v * v;
    if (g) {
      g->assign(1, in[0]);
      for (auto& v : (*g)[0].values()) v = 3.03 * v * v;  // 1% off
    }
    return s;
  };
  std::mt19937_64 rng(1);
  const auto r = check_gradient("cube", cube, {fixtures::random_tensor({5}, 2, 0.5, 1.0)}, {"x"}, rng);
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 5e-3);
}

TEST(CheckGradient, ProjectedExpressionPasses) {
  const Expression expr = [](Tape<double>&, const std::vector<Var<double>>& v) {
    return ops::mul(ops::sigmoid(v[0]), v[1]);
  };
  std::mt19937_64 rng(3);
  const auto r = check_gradient("sigmoid_mul", projected_objective(expr, 4),
                                {fixtures::random_tensor({2, 3}, 5), fixtures::random_tensor({2, 3}, 6)},
                                {"a", "b"}, rng);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
  EXPECT_EQ(r.entries, 12u);
}

TEST(GradientSuite, PrimitivesOverSeeds) {
  for (std::uint64_t seed : {1, 2, 3}) expect_all_pass(gradcheck_ops(seed));
}

TEST(GradientSuite, PrimitivesCoverEveryOp) {
  std::set<std::string> names;
  for (const auto& r : gradcheck_ops(7)) names.insert(r.name.substr(0, r.name.find('[')));
  for (const char* op : {"conv2d", "batch_norm", "layer_norm", "relu", "sigmoid", "max_pool2d",
                         "global_avg_pool", "linear", "concat_channels", "slice_channels", "fft2d",
                         "ifft2d", "dwt2", "idwt2", "wtconv", "cdc_conv", "bce_with_logits"}) {
    bool found = false;
    for (const auto& n : names) found = found || n.find(op) != std::string::npos;
    EXPECT_TRUE(found) << op;
  }
}

TEST(GradientSuite, BlocksAndNetwork) {
  for (std::uint64_t seed : {1, 2, 3}) expect_all_pass(gradcheck_blocks(seed));
}
