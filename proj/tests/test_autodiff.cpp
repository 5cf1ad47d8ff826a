#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "emea/autodiff.hpp"
#include "emea/error.hpp"
#include "oracle.hpp"

using namespace emea;

namespace {

// sum(out ⊙ W) with |W| in [1, 3] and random signs, so every output element
// carries a distinct cotangent of a size that float32 differences resolve.
struct Readout {
  Tensor weights;
  Node apply(const Node& out) const {
    const Shape& s = out.shape();
    if (s.empty()) return scale(out, weights[0]);
    if (s.size() == 1) {
      // Lift [n] to [1×n] by adding it as a bias onto a zero row.
      Node row = add_bias(Node::leaf(Tensor(Shape{1, s[0]}, 0.0f)), out);
      return sum(row_dot(row, Node::leaf(Tensor(Shape{1, s[0]}, weights.storage()))));
    }
    return sum(row_dot(out, Node::leaf(weights)));
  }
};

Readout readout_for(const Shape& shape, std::mt19937_64& rng) {
  Shape s = shape;
  if (s.empty()) s = {1};
  Tensor w = oracle::random_tensor(s, rng, 1.0f, 3.0f);
  for (auto& v : w.storage())
    if (rng() % 2) v = -v;
  return Readout{w};
}

double scalar_value(const Node& n) { return static_cast<double>(n.value().item()); }

// Builds op(inputs), reduces it with a random readout, and compares the
// analytic gradient of every requires-grad input with central differences.
double gradcheck(std::vector<Tensor> inputs, const std::function<Node(const std::vector<Node>&)>& op,
                 std::mt19937_64& rng, float step = 1e-3f) {
  std::vector<Node> leaves;
  for (auto& t : inputs) leaves.push_back(Node::leaf(t, true));
  Node out = op(leaves);
  const Readout r = readout_for(out.shape(), rng);
  backward(r.apply(out));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = oracle::to_double(leaves[k].grad());
    auto numeric = oracle::numeric_gradient(inputs[k], [&] {
      std::vector<Node> fresh;
      for (auto& t : inputs) fresh.push_back(Node::leaf(t));
      return scalar_value(r.apply(op(fresh)));
    }, step);
    // float32 central differences at step 1e-3 carry up to ~1e-4 of absolute
    // noise per entry, so gradient norms below 1 are compared on that scale.
    std::vector<double> diff(analytic.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - numeric[i];
    const double scale = std::max({oracle::norm2(analytic), oracle::norm2(numeric), 1.0});
    worst = std::max(worst, oracle::norm2(diff) / scale);
  }
  return worst;
}

// Keeps relu/ReLU-like inputs away from the kink.
Tensor away_from_zero(Tensor t) {
  for (auto& v : t.storage())
    if (std::fabs(v) < 0.05f) v = v < 0 ? -0.05f - v : 0.05f + v;
  return t;
}

}  // namespace

TEST_CASE("matmul examples") {
  Node a = Node::leaf(Tensor::matrix({{1, 0}, {0, 1}}));
  Node b = Node::leaf(Tensor::matrix({{3, 4}, {5, 6}}));
  CHECK(matmul(a, b).value().bit_equal(Tensor::matrix({{3, 4}, {5, 6}})));

  Node x = Node::leaf(Tensor::matrix({{1, 2}}), true);
  Node y = Node::leaf(Tensor::matrix({{3}, {4}}));
  Node prod = matmul(x, y);
  CHECK(prod.value().item() == doctest::Approx(11.0));
  backward(sum(prod));
  CHECK(x.grad().bit_equal(Tensor::matrix({{3, 4}})));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Node a = Node::leaf(Tensor(Shape{2, 3}));
  Node b = Node::leaf(Tensor(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(shape_string({2, 3})) != std::string::npos);
    CHECK(std::string(e.category()) == "dimension");
  }
}

TEST_CASE("softmax examples") {
  auto p = softmax(Node::leaf(Tensor::vector({0, 0}))).value();
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == doctest::Approx(0.5));
  auto q = softmax(Node::leaf(Tensor::vector({std::log(2.0f), 0}))).value();
  CHECK(q[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
  CHECK(q[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = oracle::random_tensor({5}, rng, -4, 4);
    Tensor shifted = x;
    for (auto& v : shifted.storage()) v += 7.25f;
    auto a = softmax(Node::leaf(x)).value();
    auto b = softmax(Node::leaf(shifted)).value();
    for (std::size_t i = 0; i < 5; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-5));
  }
}

TEST_CASE("softmax rows lie on the simplex") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = oracle::random_tensor({4, 6}, rng, -30, 30);
    const Tensor p = softmax(Node::leaf(x)).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        CHECK(p.at(r, c) >= 0.0f);
        s += p.at(r, c);
      }
      CHECK(std::fabs(s - 1.0) < 1e-6);
    }
    const Tensor col = softmax(Node::leaf(x), 0).value();
    for (std::size_t c = 0; c < 6; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < 4; ++r) s += col.at(r, c);
      CHECK(std::fabs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("entropy examples") {
  CHECK(entropy(Node::leaf(Tensor::matrix({{1, 0, 0, 0}}))).value().item() == 0.0f);
  CHECK(entropy(Node::leaf(Tensor::matrix({{0.25f, 0.25f, 0.25f, 0.25f}}))).value().item() ==
        doctest::Approx(1.38629).epsilon(1e-5));
  CHECK(entropy(Node::leaf(Tensor::matrix({{0.7f, 0.3f}}))).value().item() ==
        doctest::Approx(0.61086).epsilon(1e-5));
}

TEST_CASE("entropy rejects rows off the simplex") {
  CHECK_THROWS_AS(entropy(Node::leaf(Tensor::matrix({{0.7f, 0.31f}}))), ContractError);
  CHECK_THROWS_AS(entropy(Node::leaf(Tensor::matrix({{1.2f, -0.2f}}))), ContractError);
  CHECK_NOTHROW(entropy(Node::leaf(Tensor::matrix({{0.7f, 0.3005f}}))));
}

TEST_CASE("entropy stays within [0, ln C]") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 2 + trial % 6;
    Tensor x = oracle::random_tensor({3, c}, rng, -8, 8);
    const float h = entropy(softmax(Node::leaf(x))).value().item();
    CHECK(h >= 0.0f);
    CHECK(h <= 3.0f * std::log(static_cast<float>(c)) + 1e-5f);
  }
}

TEST_CASE("backward examples") {
  Node x = Node::leaf(Tensor::vector({1, 2, 3}), true);
  backward(sum(x));
  CHECK(x.grad().bit_equal(Tensor::vector({1, 1, 1})));

  Node beta = Node::leaf(Tensor::vector({0, 0}), true);
  Node h = entropy(softmax(beta));
  backward(h);
  CHECK(std::fabs(beta.grad()[0]) < 1e-7f);
  CHECK(std::fabs(beta.grad()[1]) < 1e-7f);
}

TEST_CASE("backward accumulates across calls and rejects non-scalar roots") {
  Node x = Node::leaf(Tensor::vector({1, 2}), true);
  backward(sum(scale(x, 2.0f)));
  backward(sum(scale(x, 2.0f)));
  CHECK(x.grad().bit_equal(Tensor::vector({4, 4})));
  x.zero_grad();
  CHECK(x.grad().bit_equal(Tensor::vector({0, 0})));
  CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("leaves without requires_grad never receive gradient") {
  Node a = Node::leaf(Tensor::matrix({{1, 2}}), true);
  Node b = Node::leaf(Tensor::matrix({{3}, {4}}));
  backward(sum(matmul(a, b)));
  CHECK_FALSE(b.has_grad());
  CHECK(a.has_grad());
}

TEST_CASE("diamond graph visits the shared node once") {
  Node x = Node::leaf(Tensor::vector({2}), true);
  Node y = scale(x, 3.0f);
  backward(sum(add(y, y)));
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward is deterministic for identical graphs") {
  std::mt19937_64 rng(9);
  Tensor a = oracle::random_tensor({3, 4}, rng), b = oracle::random_tensor({4, 5}, rng);
  Tensor grads[2];
  for (auto& g : grads) {
    Node na = Node::leaf(a, true);
    backward(entropy(softmax(matmul(na, Node::leaf(b)))));
    g = na.grad();
  }
  CHECK(grads[0].bit_equal(grads[1]));
}

TEST_CASE("gradient check of every op on 10 seeds") {
  using V = std::vector<Node>;
  const double tol = 1e-3;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    std::mt19937_64 rng(seed);
    auto R = [&](Shape s, float lo = -1, float hi = 1) { return oracle::random_tensor(s, rng, lo, hi); };

    CHECK(gradcheck({R({3, 4}), R({4, 2})}, [](const V& v) { return matmul(v[0], v[1]); }, rng) < tol);
    CHECK(gradcheck({R({3, 4})}, [](const V& v) { return transpose(v[0]); }, rng) < tol);
    CHECK(gradcheck({R({2, 3}), R({2, 3})}, [](const V& v) { return add(v[0], v[1]); }, rng) < tol);
    CHECK(gradcheck({R({3, 4}), R({4})}, [](const V& v) { return add_bias(v[0], v[1]); }, rng) < tol);
    CHECK(gradcheck({R({2, 3})}, [](const V& v) { return scale(v[0], -1.7f); }, rng) < tol);
    CHECK(gradcheck({away_from_zero(R({3, 4}))}, [](const V& v) { return relu(v[0]); }, rng) < tol);
    CHECK(gradcheck({R({3, 4}, -3, 3)}, [](const V& v) { return gelu(v[0]); }, rng) < tol);
    CHECK(gradcheck({R({3, 6}, -2, 2), R({6}, 0.5f, 1.5f), R({6})},
                    [](const V& v) { return layer_norm(v[0], v[1], v[2]); }, rng) < tol);
    CHECK(gradcheck({R({5}, -2, 2)}, [](const V& v) { return softmax(v[0]); }, rng) < tol);
    CHECK(gradcheck({R({3, 4}, -2, 2)}, [](const V& v) { return softmax(v[0]); }, rng) < tol);
    CHECK(gradcheck({R({3, 4}, -2, 2)}, [](const V& v) { return softmax(v[0], 0); }, rng) < tol);
    CHECK(gradcheck({R({3, 4}, -2, 2)}, [](const V& v) { return entropy(softmax(v[0])); }, rng) < tol);
    CHECK(gradcheck({R({3, 4})}, [](const V& v) { return sum(v[0]); }, rng) < tol);
    const std::vector<int> targets{2, -1, 0, 3};
    CHECK(gradcheck({R({4, 5}, -2, 2)}, [&](const V& v) { return cross_entropy(v[0], targets); }, rng) < tol);
    CHECK(gradcheck({R({4, 5}, -2, 2)}, [&](const V& v) { return cross_entropy(v[0], targets, true); }, rng) < tol);
    const std::vector<int> ids{3, 1, 3, 0};
    CHECK(gradcheck({R({5, 3})}, [&](const V& v) { return embedding(v[0], ids); }, rng) < tol);
    const std::vector<int> rows{2, 0, 2};
    CHECK(gradcheck({R({4, 3})}, [&](const V& v) { return gather_rows(v[0], rows); }, rng) < tol);
    CHECK(gradcheck({R({3, 6})}, [](const V& v) { return slice_cols(v[0], 2, 3); }, rng) < tol);
    CHECK(gradcheck({R({3, 2}), R({3, 1}), R({3, 3})},
                    [](const V& v) { return concat_cols({v[0], v[1], v[2]}); }, rng) < tol);
    CHECK(gradcheck({R({3}), R({2, 4}), R({2, 4}), R({2, 4})},
                    [](const V& v) { return weighted_sum(v[0], {v[1], v[2], v[3]}); }, rng) < tol);
    CHECK(gradcheck({R({3, 4}), R({3, 4})}, [](const V& v) { return row_dot(v[0], v[1]); }, rng) < tol);
    CHECK(gradcheck({R({3, 4}), R({3, 1})}, [](const V& v) { return scale_rows(v[0], v[1]); }, rng) < tol);
  }
}

TEST_CASE("random two-layer network matches a double-precision finite-difference oracle") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    std::mt19937_64 rng(100 + seed);
    std::vector<Tensor> in{oracle::random_tensor({4, 5}, rng), oracle::random_tensor({5, 6}, rng),
                           oracle::random_tensor({6}, rng), oracle::random_tensor({6, 3}, rng)};
    std::vector<Node> leaves;
    for (auto& t : in) leaves.push_back(Node::leaf(t, true));
    Node h = gelu(add_bias(matmul(leaves[0], leaves[1]), leaves[2]));
    backward(entropy(softmax(matmul(h, leaves[3]))));

    // Same network evaluated entirely in double.
    std::vector<oracle::Mat> m;
    for (auto& t : in) m.push_back(oracle::from(t));
    auto f = [&] {
      oracle::Mat z = oracle::mm(m[0], m[1]);
      for (std::size_t i = 0; i < z.r; ++i)
        for (std::size_t j = 0; j < z.c; ++j) z(i, j) = oracle::gelu(z(i, j) + m[2].v[j]);
      return oracle::entropy(oracle::softmax_rows(oracle::mm(z, m[3])));
    };
    for (std::size_t k = 0; k < in.size(); ++k) {
      std::vector<double> numeric(m[k].v.size());
      for (std::size_t i = 0; i < numeric.size(); ++i) {
        const double orig = m[k].v[i];
        m[k].v[i] = orig + 1e-3;
        const double up = f();
        m[k].v[i] = orig - 1e-3;
        const double down = f();
        m[k].v[i] = orig;
        numeric[i] = (up - down) / 2e-3;
      }
      CHECK(oracle::relative_error(oracle::to_double(leaves[k].grad()), numeric) < 1e-3);
    }
  }
}

TEST_CASE("ops reject mismatched shapes") {
  Node a = Node::leaf(Tensor(Shape{2, 3}));
  CHECK_THROWS_AS(add(a, Node::leaf(Tensor(Shape{3, 2}))), DimensionError);
  CHECK_THROWS_AS(add_bias(a, Node::leaf(Tensor(Shape{2}))), DimensionError);
  CHECK_THROWS_AS(slice_cols(a, 2, 2), DimensionError);
  CHECK_THROWS_AS(row_dot(a, Node::leaf(Tensor(Shape{2, 2}))), DimensionError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  const std::vector<int> bad{5};
  CHECK_THROWS_AS(gather_rows(a, bad), DimensionError);
}
