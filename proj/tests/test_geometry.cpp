// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Eigenvalues>

#include <cmath>

#include "warpgrad/geometry.hpp"
#include "warpgrad/network.hpp"
#include "warpgrad/rng.hpp"

using namespace warpgrad;

namespace {

Tensor random_matrix(RngStream& rng, int r, int c, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(Shape::matrix(r, c));
  double* d = t.mutable_data();
  for (std::size_t i = 0; i < t.numel(); ++i) d[i] = rng.uniform(lo, hi);
  return t;
}

/// Positive-definite random quadratic: L(p) = sum_i w_i (p_i - c_i)^2 + cross.
class QuadraticLoss : public PointLoss {
 public:
  QuadraticLoss(std::vector<double> w, std::vector<double> c, double cross)
      : w_(std::move(w)), c_(std::move(c)), cross_(cross) {}

  Var build(Graph& g, Var p) const override {
    const int d = static_cast<int>(w_.size());
    Tensor wrow(Shape::matrix(1, d), std::vector<double>(w_));
    Tensor crow(Shape::matrix(1, d), std::vector<double>(c_));
    Var diff = g.sub(p, g.constant(crow));
    Var quad = g.sum(g.mul(g.constant(wrow), g.square(diff)));
    // cross term: cross * (p_0 - c_0) * (p_1 - c_1)
    Tensor e0(Shape::matrix(d, 1));
    e0.mutable_data()[0] = 1.0;
    Tensor e1(Shape::matrix(d, 1));
    e1.mutable_data()[1] = 1.0;
    Var x0 = g.matmul(diff, g.constant(e0));
    Var x1 = g.matmul(diff, g.constant(e1));
    return g.add(quad, g.scale(g.sum(g.mul(x0, x1)), cross_));
  }

 private:
  std::vector<double> w_, c_;
  double cross_;
};

WarpedNetwork random_warp_2d(std::uint64_t seed) {
  auto net = build_network(surface2d_layers(8), split_rng(seed, 0));
  RngStream rng(seed, 99);
  for (int id : net.partition.warp_ids) {
    Tensor& t = net.params.value(id);
    double* d = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) d[i] += rng.uniform(-0.5, 0.5);
  }
  return net;
}

}  // namespace

TEST_CASE("identity warps give identity preconditioner blocks and plain grads") {
  std::vector<LayerSpec> spec = {
      LayerSpec::task_linear(2, 5), LayerSpec::activation(Activation::kTanh, 5),
      LayerSpec::warp_linear(5), LayerSpec::task_linear(5, 1)};
  auto net = build_network(spec, split_rng(21, 0));
  auto blocks = explicit_preconditioner(net);
  REQUIRE(blocks.size() == 2);
  CHECK(max_abs_diff(blocks[0], Tensor::identity(5)) == 0.0);
  CHECK(max_abs_diff(blocks[1], Tensor::identity(1)) == 0.0);

  RngStream rng(22, 1);
  Batch batch{random_matrix(rng, 4, 2), random_matrix(rng, 4, 1)};
  GradMap warped = task_gradient(net, batch);
  // identical net without the warp layer
  std::vector<LayerSpec> plain_spec = {
      LayerSpec::task_linear(2, 5), LayerSpec::activation(Activation::kTanh, 5),
      LayerSpec::task_linear(5, 1)};
  auto plain = build_network(plain_spec, split_rng(23, 0));
  for (std::size_t i = 0; i < plain.partition.task_ids.size(); ++i) {
    plain.params.value(plain.partition.task_ids[i]) =
        net.params.value(net.partition.task_ids[i]);
  }
  GradMap unwarped = task_gradient(plain, batch);
  for (std::size_t i = 0; i < warped.grads.size(); ++i) {
    CHECK(max_abs_diff(warped.grads[i], unwarped.grads[i]) <= 1e-15);
  }
}

TEST_CASE("warped gradient equals the explicit block-preconditioned gradient") {
  // random 2x2 warp on a one-hidden-layer net, plus a deeper mixed net
  for (std::uint64_t seed : {31, 32, 33, 34, 35}) {
    std::vector<LayerSpec> spec = {
        LayerSpec::task_linear(3, 2), LayerSpec::activation(Activation::kTanh, 2),
        LayerSpec::warp_linear(2), LayerSpec::task_linear(2, 2),
        LayerSpec::activation(Activation::kSigmoid, 2), LayerSpec::warp_linear(2),
        LayerSpec::warp_linear(2), LayerSpec::task_linear(2, 1)};
    auto net = build_network(spec, split_rng(seed, 0));
    RngStream rng(seed, 1);
    for (int id : net.partition.warp_ids) {
      net.params.value(id) = random_matrix(rng, 2, 2);
    }
    Batch batch{random_matrix(rng, 5, 3), random_matrix(rng, 5, 1)};
    GradMap warped = task_gradient(net, batch);
    GradMap oracle = preconditioned_gradient_oracle(net, batch);
    for (std::size_t i = 0; i < warped.ids.size(); ++i) {
      REQUIRE(max_abs_diff(warped.grads[i], oracle.for_id(warped.ids[i])) <=
              1e-10);
    }
  }
}

TEST_CASE("explicit preconditioner composes consecutive linear warps") {
  std::vector<LayerSpec> spec = {LayerSpec::task_linear(2, 2, false),
                                 LayerSpec::warp_linear(2),
                                 LayerSpec::warp_linear(2)};
  auto net = build_network(spec, split_rng(36, 0));
  RngStream rng(36, 1);
  Tensor A = random_matrix(rng, 2, 2);
  Tensor Bm = random_matrix(rng, 2, 2);
  net.params.value(net.params.index_of("w1.T")) = A;
  net.params.value(net.params.index_of("w2.T")) = Bm;
  auto blocks = explicit_preconditioner(net);
  REQUIRE(blocks.size() == 1);
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 2; ++c) {
      double want = 0.0;
      for (int k = 0; k < 2; ++k) want += A(r, k) * Bm(k, c);
      CHECK(blocks[0](r, c) == Catch::Approx(want).epsilon(1e-14));
    }
  }
}

TEST_CASE("scaling warp matches the oracle and scales the gradient") {
  const double c = 2.5;
  std::vector<LayerSpec> spec = {LayerSpec::task_linear(3, 2, false),
                                 LayerSpec::warp_linear(2)};
  auto net = build_network(spec, split_rng(37, 0));
  RngStream rng(37, 1);
  Batch batch{random_matrix(rng, 4, 3), random_matrix(rng, 4, 2)};

  auto scaled = build_network(spec, split_rng(37, 0));
  Tensor T = Tensor::identity(2);
  for (std::size_t i = 0; i < T.numel(); ++i) T.mutable_data()[i] *= c;
  scaled.params.value(scaled.params.index_of("w1.T")) = T;
  GradMap oracle = preconditioned_gradient_oracle(scaled, batch);
  GradMap warped = task_gradient(scaled, batch);
  for (std::size_t i = 0; i < warped.grads.size(); ++i) {
    REQUIRE(max_abs_diff(warped.grads[i], oracle.for_id(warped.ids[i])) <= 1e-10);
  }
  // pure-scaling structure: with zero targets the forward scales the residual
  // by c and the backward applies T once more, so the gradient scales by c^2.
  Batch zeroed{batch.inputs, Tensor(Shape::matrix(4, 2))};
  GradMap g_base = task_gradient(net, zeroed);
  GradMap g_scaled = task_gradient(scaled, zeroed);
  for (std::size_t i = 0; i < g_base.grads.size(); ++i) {
    Tensor expect = g_base.grads[i];
    for (std::size_t k = 0; k < expect.numel(); ++k) {
      expect.mutable_data()[k] *= c * c;
    }
    CHECK(max_abs_diff(expect, g_scaled.grads[i]) <= 1e-10);
  }
}

TEST_CASE("non-linear warp rejected by the explicit preconditioner") {
  auto net = build_network(surface2d_layers(8), split_rng(38, 0));
  CHECK_THROWS_WITH(explicit_preconditioner(net),
                    Catch::Matchers::ContainsSubstring("non-linear"));
  Batch b{Tensor(Shape::matrix(1, 1), {1.0}), Tensor(Shape::matrix(1, 2))};
  CHECK_THROWS_AS(preconditioned_gradient_oracle(net, b), TensorError);
}

TEST_CASE("warped space steps with identity warp") {
  auto net = build_network(surface2d_layers(8), split_rng(41, 0));
  QuadraticLoss loss({1.0, 2.0}, {0.3, -0.4}, 0.5);
  std::vector<double> theta{1.0, -2.0};
  auto steps = warped_space_steps(net, theta, loss);
  auto grad = loss.gradient(theta);
  for (int i = 0; i < 2; ++i) {
    CHECK(steps.gamma[i] == theta[i]);
    CHECK(steps.dtheta[i] == Catch::Approx(grad[i]).epsilon(1e-14));
    CHECK(steps.dgamma[i] == Catch::Approx(grad[i]).epsilon(1e-14));
  }
  for (double a : {0.1, 0.01, 0.001}) CHECK(steps.taylor_gap(a) <= 1e-14);
}

TEST_CASE("linear warp gives G^-1 = A A^T exactly") {
  std::vector<LayerSpec> spec = {LayerSpec::task_linear(1, 2, false),
                                 LayerSpec::warp_linear(2)};
  auto net = build_network(spec, split_rng(42, 0));
  RngStream rng(42, 1);
  Tensor T = random_matrix(rng, 2, 2);  // row convention: gamma = theta T
  net.params.value(net.params.index_of("w1.T")) = T;
  QuadraticLoss loss({1.0, 1.5}, {0.0, 0.0}, 0.3);
  auto steps = warped_space_steps(net, {0.7, -1.1}, loss);
  // column-convention map A = T^T, so (A A^T)_{ab} = sum_i T(i,a) T(i,b)
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      double want = 0.0;
      for (int i = 0; i < 2; ++i) want += T(i, a) * T(i, b);
      CHECK(steps.g_inv(a, b) == Catch::Approx(want).epsilon(1e-13));
    }
  }
}

TEST_CASE("push-forward metric is positive semi-definite at random points") {
  auto net = random_warp_2d(43);
  QuadraticLoss loss({1.0, 1.0}, {0.0, 0.0}, 0.0);
  RngStream rng(44, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> theta{rng.uniform(-3, 3), rng.uniform(-3, 3)};
    auto steps = warped_space_steps(net, theta, loss);
    Eigen::Matrix2d M;
    M << steps.g_inv(0, 0), steps.g_inv(0, 1), steps.g_inv(1, 0),
        steps.g_inv(1, 1);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(M);
    REQUIRE(es.eigenvalues()(0) >= -1e-12);
    REQUIRE(es.eigenvalues()(1) >= -1e-12);
  }
}

TEST_CASE("taylor gap decays quadratically under alpha halving") {
  // Averaged empirical order over 20 random warp instances in [1.7, 2.3].
  double sum_order = 0.0;
  int count = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto net = random_warp_2d(100 + seed);
    RngStream rng(200 + seed, 1);
    QuadraticLoss loss({rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)},
                       {rng.uniform(-1, 1), rng.uniform(-1, 1)},
                       rng.uniform(-0.5, 0.5));
    std::vector<double> theta{rng.uniform(-2, 2), rng.uniform(-2, 2)};
    auto steps = warped_space_steps(net, theta, loss);
    const double g1 = steps.taylor_gap(1e-2);
    const double g2 = steps.taylor_gap(5e-3);
    REQUIRE(g1 > 1e-14);
    REQUIRE(g2 > 1e-15);
    sum_order += std::log2(g1 / g2);
    ++count;
    // spot check: the gap ratio under halving approaches 1/4
    if (seed == 0) {
      for (double a : {1e-1, 1e-2}) {
        const double r = steps.taylor_gap(a / 2) / steps.taylor_gap(a);
        CHECK(r == Catch::Approx(0.25).margin(0.15));
      }
    }
  }
  const double mean_order = sum_order / count;
  CHECK(mean_order >= 1.7);
  CHECK(mean_order <= 2.3);
}
