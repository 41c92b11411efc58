#include <doctest.h>

#include "diffcast/autograd.hpp"
#include "diffcast/nn.hpp"
#include "testing_util.hpp"

using namespace diffcast;
using namespace diffcast::ag;
using diffcast::testing::fd_check_leaves;
using diffcast::testing::random_tensor;

namespace {

void expect_no_failures(const std::vector<testing::FdFailure>& fails) {
  for (const auto& f : fails)
    MESSAGE("fd mismatch at ", f.where, ": analytic=", f.analytic, " numeric=", f.numeric, " rel=", f.err);
  CHECK(fails.empty());
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(7);
  Var a(random_tensor({3, 4}, rng), true);
  Var b(random_tensor({3, 4}, rng), true);
  auto loss = [&] { return mean_all(mul(sigmoid(add(a, scale(b, 0.7))), tanh_(sub(a, b)))); };
  expect_no_failures(fd_check_leaves(loss, {a, b}, rng, 8));
}

TEST_CASE("silu and softmax match finite differences") {
  Rng rng(11);
  Var a(random_tensor({2, 5}, rng), true);
  auto loss = [&] { return mean_all(mul(softmax_lastdim(a), silu(a))); };
  expect_no_failures(fd_check_leaves(loss, {a}, rng, 10));
}

TEST_CASE("shape ops are gradient-exact") {
  Rng rng(13);
  Var a(random_tensor({2, 3, 4}, rng), true);
  Var b(random_tensor({2, 3, 4}, rng), true);
  auto loss = [&] {
    Var p = permute(a, {2, 0, 1});
    Var r = reshape(p, {4, 6});
    Var c = concat_axis({r, reshape(b, {4, 6})}, 1);
    Var n = narrow(c, 1, 2, 7);
    return mean_all(mul(n, n));
  };
  expect_no_failures(fd_check_leaves(loss, {a, b}, rng, 8));
}

TEST_CASE("broadcast_front sums gradients over copies") {
  Rng rng(17);
  Var a(random_tensor({3, 2, 2}, rng), true);
  auto loss = [&] {
    Var bc = broadcast_front(a, 4);
    return mean_all(mul(bc, bc));
  };
  expect_no_failures(fd_check_leaves(loss, {a}, rng, 6));
}

TEST_CASE("batched matmul with transpose flags") {
  Rng rng(19);
  Var a(random_tensor({2, 3, 4}, rng), true);
  Var b(random_tensor({2, 4, 5}, rng), true);
  auto loss = [&] { return mean_all(matmul_batched(a, b)); };
  expect_no_failures(fd_check_leaves(loss, {a, b}, rng, 6));

  Var c(random_tensor({2, 4, 3}, rng), true);
  auto loss_ta = [&] { return mean_all(matmul_batched(c, b, true, false)); };
  expect_no_failures(fd_check_leaves(loss_ta, {c, b}, rng, 6));

  Var d(random_tensor({2, 5, 4}, rng), true);
  auto loss_tb = [&] { return mean_all(matmul_batched(a, d, false, true)); };
  expect_no_failures(fd_check_leaves(loss_tb, {a, d}, rng, 6));
}

TEST_CASE("linear layer gradients") {
  Rng rng(23);
  Var x(random_tensor({4, 6}, rng), true);
  Var w(random_tensor({3, 6}, rng), true);
  Var b(random_tensor({3}, rng), true);
  auto loss = [&] { return mean_all(mul(linear(x, w, b), linear(x, w, b))); };
  expect_no_failures(fd_check_leaves(loss, {x, w, b}, rng, 8));
}

TEST_CASE("conv2d gradients (stride 1 and 2)") {
  Rng rng(29);
  Var x(random_tensor({2, 3, 8, 8}, rng), true);
  Var w(random_tensor({4, 3, 3, 3}, rng, 0.3), true);
  Var b(random_tensor({4}, rng, 0.1), true);
  auto loss1 = [&] { return mean_all(mul(conv2d(x, w, b, 1, 1), conv2d(x, w, b, 1, 1))); };
  expect_no_failures(fd_check_leaves(loss1, {x, w, b}, rng, 8));
  auto loss2 = [&] { return mean_all(mul(conv2d(x, w, b, 2, 1), conv2d(x, w, b, 2, 1))); };
  expect_no_failures(fd_check_leaves(loss2, {x, w, b}, rng, 8));
}

TEST_CASE("conv_transpose2d gradients and exact 2x upsample shape") {
  Rng rng(31);
  Var x(random_tensor({2, 3, 4, 4}, rng), true);
  Var w(random_tensor({3, 5, 4, 4}, rng, 0.3), true);
  Var b(random_tensor({5}, rng, 0.1), true);
  Var y = conv_transpose2d(x, w, b, 2, 1);
  CHECK(y.shape() == Shape{2, 5, 8, 8});
  auto loss = [&] {
    Var out = conv_transpose2d(x, w, b, 2, 1);
    return mean_all(mul(out, out));
  };
  expect_no_failures(fd_check_leaves(loss, {x, w, b}, rng, 8));
}

TEST_CASE("conv_transpose2d equals the adjoint of conv2d") {
  // <conv(x), y> == <x, convT(y)> for matching weights and zero bias.
  Rng rng(37);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, 0.5);
  Var zero_b4(Tensor::zeros({4}), false);
  Var zero_b3(Tensor::zeros({3}), false);
  Var x(random_tensor({1, 3, 6, 6}, rng), false);
  Var y(random_tensor({1, 4, 3, 3}, rng), false);

  Var conv_x = conv2d(x, Var(w, false), zero_b4, 2, 1);
  REQUIRE(conv_x.shape() == y.shape());
  // Shared weight: convT's [Cin, Cout, kh, kw] layout is exactly conv's
  // [Cout, Cin, kh, kw] read with the adjoint's channel roles.
  Var xt = conv_transpose2d(y, Var(w, false), zero_b3, 2, 1);
  REQUIRE(xt.shape() == x.shape());

  real lhs = 0.0, rhs = 0.0;
  for (int64_t i = 0; i < conv_x.numel(); ++i) lhs += conv_x.value()[i] * y.value()[i];
  for (int64_t i = 0; i < x.numel(); ++i) rhs += x.value()[i] * xt.value()[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("group_norm gradients") {
  Rng rng(41);
  Var x(random_tensor({2, 6, 4, 4}, rng), true);
  Var gamma(random_tensor({6}, rng, 0.5), true);
  Var beta(random_tensor({6}, rng, 0.5), true);
  auto loss = [&] {
    Var y = group_norm(x, gamma, beta, 3);
    return mean_all(mul(y, sigmoid(y)));
  };
  expect_no_failures(fd_check_leaves(loss, {x, gamma, beta}, rng, 10));
}

TEST_CASE("add_channel_bias gradients") {
  Rng rng(43);
  Var x(random_tensor({3, 4, 2, 2}, rng), true);
  Var v(random_tensor({4}, rng), true);
  auto loss = [&] {
    Var y = add_channel_bias(x, v);
    return mean_all(mul(y, y));
  };
  expect_no_failures(fd_check_leaves(loss, {x, v}, rng, 8));
}

TEST_CASE("detach blocks gradient flow") {
  Rng rng(47);
  Var a(random_tensor({2, 2}, rng), true);
  a.zero_grad();
  Var loss = mean_all(mul(detach(a), a));
  backward(loss);
  // d/da of mean(c * a) where c = detach(a): gradient is c / n, not 2a / n.
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(a.grad()[i] == doctest::Approx(a.value()[i] / 4.0));
}

TEST_CASE("gradient accumulates across reuse of the same variable") {
  Var a(Tensor({2}, {3.0, -1.0}), true);
  a.zero_grad();
  Var loss = sum_all(mul(a, a));
  backward(loss);
  CHECK(a.grad()[0] == doctest::Approx(6.0));
  CHECK(a.grad()[1] == doctest::Approx(-2.0));
}
