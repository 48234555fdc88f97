#include <doctest.h>

#include <cmath>
#include <vector>

#include "tams/common.hpp"
#include "tams/ndgrad.hpp"

using namespace tams;
using namespace tams::ndgrad;

namespace {

// Independent central-difference oracle; kept separate from ndgrad::grad_check
// so the two can cross-check each other.
std::vector<double> fd_gradient(const std::function<Tensor(const Tensor&)>& f,
                                const Tensor& point, double step = 1e-5) {
  std::vector<double> base = point.data();
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    Tensor hi(point.shape(), base);
    hi.mutable_data()[i] += step;
    Tensor lo(point.shape(), base);
    lo.mutable_data()[i] -= step;
    out[i] = (f(hi).item() - f(lo).item()) / (2.0 * step);
  }
  return out;
}

double max_rel_err(const std::vector<double>& analytic, const std::vector<double>& fd) {
  REQUIRE(analytic.size() == fd.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, std::abs(analytic[i] - fd[i]) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Analytic-vs-FD check for a scalar-valued function of one tensor input.
void check_gradient(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                    double tol = 1e-4) {
  Graph g;
  Tensor leaf = g.leaf(point);
  Tensor out = f(leaf);
  g.backward(out);
  CHECK(max_rel_err(leaf.grad(), fd_gradient(f, point)) < tol);
}

}  // namespace

TEST_CASE("elementwise forward values") {
  CHECK(sigmoid(Tensor(0.0)).item() == doctest::Approx(0.5));
  CHECK(relu(Tensor(-3.0)).item() == 0.0);
  CHECK(relu(Tensor(2.5)).item() == 2.5);
  Tensor s = add(Tensor({2}, {1, 2}), Tensor({2}, {10, 20}));
  CHECK(s.data() == std::vector<double>{11, 22});
  CHECK(tanh(Tensor(0.0)).item() == 0.0);
  CHECK(exp(Tensor(0.0)).item() == 1.0);
  CHECK(softplus(Tensor(0.0)).item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("broadcast addition commutes exactly") {
  Rng rng(7);
  std::vector<std::pair<Shape, Shape>> cases = {
      {{3, 4}, {4}}, {{2, 1, 5}, {3, 1}}, {{}, {2, 2}}, {{6}, {}}, {{2, 3}, {2, 3}}};
  for (auto& [sa, sb] : cases) {
    Tensor a = random_tensor(sa, rng);
    Tensor b = random_tensor(sb, rng);
    CHECK(add(a, b).data() == add(b, a).data());
    CHECK(mul(a, b).data() == mul(b, a).data());
  }
}

TEST_CASE("non-broadcastable shapes are rejected") {
  Tensor a({2, 3}, 1.0);
  Tensor b({4}, 1.0);
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(elementwise(EwKind::mul, a, &b), ShapeError);
}

TEST_CASE("log of non-positive values propagates NaN and flags") {
  reset_domain_error_count();
  Tensor out = log(Tensor({2}, {1.0, -1.0}));
  CHECK(std::isnan(out.data()[1]));
  CHECK(out.data()[0] == doctest::Approx(0.0));
  CHECK(domain_error_count() == 1);
  Graph g;
  Tensor leaf = g.leaf(Tensor({1}, {-2.0}));
  log(leaf);
  CHECK(g.domain_error_count() == 1);
  reset_domain_error_count();
}

TEST_CASE("matmul values") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, m).data() == m.data());
  Tensor row({1, 2}, {1, 0});
  Tensor col({2, 1}, {5, 7});
  CHECK(matmul(row, col).data() == std::vector<double>{5});
  CHECK_THROWS_AS(matmul(Tensor({2, 3}, 1.0), Tensor({2, 3}, 1.0)), ShapeError);
}

TEST_CASE("gradient of sum(A*B) wrt A") {
  Tensor a({2, 2}, 1.0);
  Tensor b({2, 2}, {1, 2, 3, 4});
  auto f = [&](const Tensor& x) { return sum(matmul(x, b)); };
  Graph g;
  Tensor leaf = g.leaf(a);
  g.backward(f(leaf));
  CHECK(leaf.grad() == std::vector<double>{3, 7, 3, 7});
  CHECK(max_rel_err(leaf.grad(), fd_gradient(f, a)) < 1e-4);
}

TEST_CASE("conv2d identity kernel is the identity map") {
  Rng rng(3);
  Tensor x = random_tensor({2, 3, 6, 6}, rng);
  std::vector<double> kd(3 * 3 * 9, 0.0);
  // One delta kernel per output channel, matched to its input channel.
  for (std::size_t f = 0; f < 3; ++f) kd[f * 27 + f * 9 + 4] = 1.0;
  Tensor k({3, 3, 3, 3}, kd);
  CHECK(conv2d(x, k).data() == x.data());
}

TEST_CASE("conv2d overlap counts with all-ones input and kernel") {
  Tensor x({1, 1, 4, 4}, 1.0);
  Tensor k({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(x, k);
  const auto& v = y.data();
  CHECK(v[0] == 4.0);   // corner
  CHECK(v[3] == 4.0);   // corner
  CHECK(v[1] == 6.0);   // edge
  CHECK(v[5] == 9.0);   // interior
  CHECK(v[10] == 9.0);  // interior
  CHECK(v[15] == 4.0);  // corner
}

TEST_CASE("conv2d kernel and input gradients match finite differences") {
  Rng rng(11);
  Tensor x = random_tensor({1, 1, 5, 5}, rng);
  Tensor k = random_tensor({2, 1, 3, 3}, rng);
  check_gradient([&](const Tensor& kk) { return sum(mul(conv2d(x, kk), conv2d(x, kk))); }, k,
                 1e-4);
  check_gradient([&](const Tensor& xx) { return mean(conv2d(xx, k)); }, x, 1e-4);
}

TEST_CASE("reductions") {
  CHECK(mean(Tensor({3}, {1, 2, 3})).item() == doctest::Approx(2.0));
  Tensor m({2, 2}, {1, 2, 3, 4});
  CHECK(sum(m, 0).data() == std::vector<double>{4, 6});
  CHECK(sum(m, 1).data() == std::vector<double>{3, 7});
  CHECK(max(Tensor({3}, {-1, 5, 2})).item() == 5.0);
  CHECK_THROWS_AS(sum(m, 2), ShapeError);
}

TEST_CASE("losses") {
  CHECK(bce_with_logits(Tensor(0.0), Tensor(1.0)).item() == doctest::Approx(std::log(2.0)));
  Tensor t({4}, {1, 0, 1, 0});
  CHECK(soft_dice_loss(t, t).item() == doctest::Approx(0.0).epsilon(1e-5));
  Tensor logits({1, 2}, {0.0, 0.0});
  CHECK(softmax_cross_entropy(logits, {0}).item() == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(bce_with_logits(Tensor({2}, 0.0), Tensor({3}, 0.0)), ShapeError);
  CHECK_THROWS_AS(soft_dice_loss(Tensor({2}, 0.0), Tensor({3}, 0.0)), ShapeError);
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(5);
  Tensor z = random_tensor({2, 3}, rng);
  Tensor t({2, 3}, {1, 0, 1, 0, 1, 0});
  check_gradient([&](const Tensor& zz) { return bce_with_logits(zz, t); }, z);
  check_gradient([&](const Tensor& zz) { return softmax_cross_entropy(zz, {1, 2}); }, z);
  Tensor p = random_tensor({6}, rng, 0.05, 0.95);
  Tensor mask({6}, {1, 1, 0, 0, 1, 0});
  check_gradient([&](const Tensor& pp) { return soft_dice_loss(pp, mask); }, p);
}

TEST_CASE("backward basics") {
  Graph g;
  Tensor x = g.leaf(Tensor(3.0));
  Tensor y = mul(x, x);
  g.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  // Repeated backward without reset accumulates.
  g.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(12.0));

  Graph g2;
  Tensor x2 = g2.leaf(Tensor(0.0));
  Tensor s = sigmoid(x2);
  g2.backward(s);
  CHECK(x2.grad()[0] == doctest::Approx(0.25));

  Graph g3;
  Tensor v = g3.leaf(Tensor({3}, {1, 2, 3}));
  CHECK_THROWS_AS(g3.backward(mul(v, v)), ShapeError);
}

TEST_CASE("three-layer MLP gradients match brute-force finite differences") {
  Rng rng(17);
  Tensor input = random_tensor({2, 3}, rng);
  // Check each parameter tensor of the network against the oracle.
  Tensor w1 = random_tensor({3, 4}, rng);
  Tensor b1 = random_tensor({4}, rng);
  Tensor w2 = random_tensor({4, 3}, rng);
  Tensor b2 = random_tensor({3}, rng);
  Tensor w3 = random_tensor({3, 1}, rng);

  auto net = [&](const Tensor& a, const Tensor& c1, const Tensor& c2, const Tensor& c3,
                 const Tensor& c4, const Tensor& c5) {
    Tensor h1 = tanh(add(matmul(a, c1), c2));
    Tensor h2 = relu(add(matmul(h1, c3), c4));
    return mean(matmul(h2, c5));
  };

  auto check_param = [&](const Tensor& point, auto rebuild) {
    Graph g;
    Tensor leaf = g.leaf(point);
    g.backward(rebuild(leaf));
    auto fd = fd_gradient([&](const Tensor& t) { return rebuild(t); }, point);
    CHECK(max_rel_err(leaf.grad(), fd) < 1e-4);
  };

  check_param(w1, [&](const Tensor& t) { return net(input, t, b1, w2, b2, w3); });
  check_param(b1, [&](const Tensor& t) { return net(input, w1, t, w2, b2, w3); });
  check_param(w2, [&](const Tensor& t) { return net(input, w1, b1, t, b2, w3); });
  check_param(b2, [&](const Tensor& t) { return net(input, w1, b1, w2, t, w3); });
  check_param(w3, [&](const Tensor& t) { return net(input, w1, b1, w2, b2, t); });
}

TEST_CASE("shaping ops gradients") {
  Rng rng(23);
  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  check_gradient([&](const Tensor& t) { return sum(mul(maxpool2(t), maxpool2(t))); }, x);
  check_gradient([&](const Tensor& t) { return mean(mul(upsample2(t), upsample2(t))); }, x);
  check_gradient([&](const Tensor& t) { return sum(mul(reshape(t, {2, 16}), reshape(t, {2, 16}))); },
                 x);
  Tensor other = random_tensor({1, 3, 4, 4}, rng);
  check_gradient([&](const Tensor& t) { return mean(mul(concat(t, other, 1), concat(t, other, 1))); },
                 x);
  check_gradient([&](const Tensor& t) { return sum(mul(concat(other, t, 1), concat(other, t, 1))); },
                 x);
}

TEST_CASE("every differentiable op matches finite differences at random points") {
  Rng rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({6}, rng, 0.2, 1.5);  // positive, away from relu kink
    Tensor b = random_tensor({6}, rng, 0.3, 1.2);
    check_gradient([&](const Tensor& t) { return sum(add(t, b)); }, x);
    check_gradient([&](const Tensor& t) { return sum(sub(t, b)); }, x);
    check_gradient([&](const Tensor& t) { return sum(mul(t, b)); }, x);
    check_gradient([&](const Tensor& t) { return sum(div(t, b)); }, x);
    check_gradient([&](const Tensor& t) { return sum(neg(t)); }, x);
    check_gradient([&](const Tensor& t) { return sum(relu(t)); }, x);
    check_gradient([&](const Tensor& t) { return sum(sigmoid(t)); }, x);
    check_gradient([&](const Tensor& t) { return sum(exp(t)); }, x);
    check_gradient([&](const Tensor& t) { return sum(log(t)); }, x);
    check_gradient([&](const Tensor& t) { return sum(tanh(t)); }, x);
    check_gradient([&](const Tensor& t) { return sum(softplus(t)); }, x);
    check_gradient([&](const Tensor& t) { return mean(t); }, x);
    check_gradient([&](const Tensor& t) { return max(t); }, x);
  }
}

TEST_CASE("grad_check oracle") {
  // Linear: exact for central differences.
  Tensor w({4}, {1.0, -2.0, 3.0, 0.5});
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(t, w)); }, Tensor({4}, {1, 2, 3, 4})) <
        1e-10);

  // Quadratic form x^T A x.
  Rng rng(31);
  Tensor a = random_tensor({4, 4}, rng);
  auto quad = [&](const Tensor& t) {
    Tensor col = reshape(t, {4, 1});
    Tensor row = reshape(t, {1, 4});
    return reshape(matmul(matmul(row, a), col), {});
  };
  CHECK(grad_check(quad, random_tensor({4}, rng)) < 1e-6);

  // relu away from the kink.
  Tensor p({3}, {0.5, -0.7, 1.2});
  CHECK(grad_check([](const Tensor& t) { return sum(relu(t)); }, p) < 1e-6);

  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return t; }, Tensor({2}, 1.0)), ShapeError);
}

TEST_CASE("tracked tensors are immutable and graphs do not mix") {
  Graph g1, g2;
  Tensor a = g1.leaf(Tensor({2}, {1, 2}));
  Tensor b = g2.leaf(Tensor({2}, {3, 4}));
  CHECK_THROWS_AS(a.mutable_data(), ValueError);
  CHECK_THROWS_AS(add(a, b), ValueError);
  CHECK_THROWS_AS(Tensor({2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(g1.backward(b), ValueError);
}

TEST_CASE("node ids are unique per graph") {
  Graph g;
  Tensor a = g.leaf(Tensor(1.0));
  Tensor b = g.leaf(Tensor(2.0));
  Tensor c = add(a, b);
  CHECK(a.node_id() != b.node_id());
  CHECK(c.node_id() != a.node_id());
  CHECK(g.node_count() == 3);
}
