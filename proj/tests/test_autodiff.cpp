#include <gtest/gtest.h>

#include <functional>

#include "sewkit/autodiff.hpp"
#include "sewkit/checkpoint.hpp"
#include "sewkit/gradcheck.hpp"
#include "sewkit/io.hpp"

using namespace sewkit;
using namespace sewkit::ad;

namespace {

Array<double> random_array(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Array<double> a(std::move(shape));
  for (auto& v : a.data) v = rng.uniform(lo, hi);
  return a;
}

/// sum(w * y) with fixed random weights so every output coordinate matters.
Var<double> weighted_sum(Tape<double>& t, const Var<double>& y, std::uint64_t seed) {
  Rng rng(seed ^ 0xabcdef);
  std::vector<double> w(y.size());
  for (auto& v : w) v = rng.uniform(-1, 1);
  return sum(mul(y, t.constant(y.shape(), w)));
}

using Fn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

struct PrimitiveCase {
  const char* name;
  std::vector<Shape> shapes;
  Fn f;
  double lo = -1.0;
  double hi = 1.0;
};

std::vector<PrimitiveCase> primitive_cases() {
  return {
      {"add", {{3, 4}, {4}}, [](auto&, auto x) { return add(x[0], x[1]); }},
      {"sub", {{4}, {2, 4}}, [](auto&, auto x) { return sub(x[0], x[1]); }},
      {"mul", {{2, 3, 4}, {3, 4}}, [](auto&, auto x) { return mul(x[0], x[1]); }},
      {"scale", {{5}}, [](auto&, auto x) { return scale(x[0], 2.5); }},
      {"matmul", {{3, 5}, {5, 2}}, [](auto&, auto x) { return matmul(x[0], x[1]); }},
      {"transpose", {{3, 5}}, [](auto&, auto x) { return transpose(x[0]); }},
      {"reshape", {{3, 4}}, [](auto&, auto x) { return reshape(x[0], {2, 6}); }},
      {"concat0", {{2, 3}, {1, 3}}, [](auto&, auto x) { return concat<double>({x[0], x[1]}, 0); }},
      {"concat1", {{2, 3}, {2, 2}}, [](auto&, auto x) { return concat<double>({x[0], x[1], x[0]}, 1); }},
      {"slice", {{3, 6}}, [](auto&, auto x) { return slice(x[0], 1, 2, 3); }},
      {"sum_axis", {{3, 4, 2}}, [](auto&, auto x) { return sum(x[0], 1); }},
      {"mean_axis", {{3, 4}}, [](auto&, auto x) { return mean(x[0], 0); }},
      {"mean_all", {{3, 4}}, [](auto&, auto x) { return mean(x[0]); }},
      {"sqrt", {{6}}, [](auto&, auto x) { return sqrt(x[0]); }, 0.5, 2.0},
      {"exp", {{6}}, [](auto&, auto x) { return exp(x[0]); }},
      {"log", {{6}}, [](auto&, auto x) { return log(x[0]); }, 0.5, 2.0},
      {"relu", {{6}}, [](auto&, auto x) { return relu(x[0]); }, 0.1, 1.0},
      {"relu_negative", {{6}}, [](auto&, auto x) { return relu(x[0]); }, -1.0, -0.1},
      {"gelu", {{8}}, [](auto&, auto x) { return gelu(x[0]); }, -3.0, 3.0},
      {"softplus", {{8}}, [](auto&, auto x) { return softplus(x[0]); }, -5.0, 5.0},
      {"square", {{4}}, [](auto&, auto x) { return square(x[0]); }},
      {"softmax", {{3, 5}}, [](auto&, auto x) { return softmax(x[0]); }},
      {"layernorm", {{4, 6}, {6}, {6}}, [](auto&, auto x) { return layernorm(x[0], x[1], x[2]); }},
      {"gather_rows", {{5, 3}}, [](auto&, auto x) { return gather_rows(x[0], {4, 0, 4, 2}); }},
      {"l2_normalize", {{3, 4}}, [](auto&, auto x) { return l2_normalize(x[0]); }},
      {"minimum", {{7}, {7}}, [](auto&, auto x) { return minimum(x[0], x[1]); }},
  };
}

}  // namespace

TEST(Autodiff, SoftmaxRowsSumToOne) {
  Tape<double> t;
  Rng rng(1);
  auto x = t.constant(random_array({4, 9}, rng, -10, 10));
  auto y = softmax(x);
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int j = 0; j < 9; ++j) s += y.value()[static_cast<std::size_t>(r * 9 + j)];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Autodiff, MatmulShape) {
  Tape<double> t;
  auto a = t.constant(Array<double>({2, 3}));
  auto b = t.constant(Array<double>({3, 4}));
  EXPECT_EQ(matmul(a, b).shape(), (Shape{2, 4}));
  try {
    matmul(b, b);
    FAIL();
  } catch (const ShapeMismatch& e) {
    EXPECT_NE(std::string(e.what()).find("[3,4] and [3,4]"), std::string::npos);
  }
}

TEST(Autodiff, LayernormStandardizesRows) {
  Tape<double> t;
  Rng rng(2);
  auto x = t.constant(random_array({5, 16}, rng, -3, 7));
  auto g = t.constant({16}, std::vector<double>(16, 1.0));
  auto b = t.constant({16}, std::vector<double>(16, 0.0));
  auto y = layernorm(x, g, b, 1e-12);
  for (int r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (int j = 0; j < 16; ++j) m += y.value()[static_cast<std::size_t>(r * 16 + j)];
    m /= 16;
    for (int j = 0; j < 16; ++j) v += std::pow(y.value()[static_cast<std::size_t>(r * 16 + j)] - m, 2);
    v /= 16;
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-9);
  }
}

TEST(Autodiff, SumOfSquaresGradient) {
  Tape<double> t;
  auto x = t.leaf({2}, {1, 2});
  auto unused = t.leaf({3}, {5, 6, 7});
  t.backward(sum(mul(x, x)));
  EXPECT_EQ(t.grad(x), (std::vector<double>{2, 4}));
  EXPECT_EQ(t.grad(unused), (std::vector<double>{0, 0, 0}));
}

TEST(Autodiff, NonScalarRoot) {
  Tape<double> t;
  auto x = t.leaf({2}, {1, 2});
  EXPECT_THROW(t.backward(x), NonScalarRoot);
}

TEST(Autodiff, BroadcastRules) {
  Tape<double> t;
  auto a = t.constant(Array<double>({2, 3}));
  auto b = t.constant(Array<double>({2}));
  EXPECT_THROW(add(a, b), ShapeMismatch);
  EXPECT_EQ(add(a, t.scalar(1.0)).shape(), (Shape{2, 3}));
}

TEST(Autodiff, MatmulMatchesFiniteDifferences) {
  Rng rng(7);
  CheckOptions opt;
  opt.step = 1e-4;
  auto r = grad_check([](auto& t, auto x) { return weighted_sum(t, matmul(x[0], x[1]), 1); },
                      {random_array({5, 7}, rng), random_array({7, 3}, rng)}, opt);
  EXPECT_EQ(r.coordinates, 5u * 7 + 7 * 3);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, QuadraticForm) {
  Rng rng(8);
  auto A = random_array({6, 6}, rng);
  auto r = grad_check(
      [&](auto& t, auto x) {
        auto v = reshape(x[0], {1, 6});
        return sum(matmul(matmul(v, t.constant(A)), transpose(v)));
      },
      {random_array({6}, rng)});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradCheck, ReportsBrokenGradient) {
  // A deliberately wrong backward rule must be caught.
  auto bad = [](Tape<double>& t, std::span<const Var<double>> x) {
    auto v = x[0].value();
    std::vector<double> out(v.begin(), v.end());
    for (auto& o : out) o = o * o;
    const auto id = x[0].id();
    auto y = t.record(x[0].shape(), out, {x[0]}, [id](Tape<double>& tp, std::uint32_t self) {
      const auto& g = tp.node(self).grad;
      for (std::size_t i = 0; i < g.size(); ++i) tp.grad_buffer(id)[i] += g[i] * tp.node(id).value[i];
    });
    return sum(y);
  };
  Rng rng(9);
  EXPECT_GT(grad_check(bad, {random_array({4}, rng, 0.5, 1.0)}).max_rel_error, 0.1);
}

TEST(GradCheck, EveryPrimitiveOverTenSeeds) {
  for (const auto& c : primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed * 31 + 1);
      std::vector<Array<double>> xs;
      for (const auto& s : c.shapes) xs.push_back(random_array(s, rng, c.lo, c.hi));
      auto f = [&](Tape<double>& t, std::span<const Var<double>> x) { return weighted_sum(t, c.f(t, x), seed); };
      auto r = grad_check(f, xs);
      EXPECT_LT(r.max_rel_error, 1e-5) << c.name << " seed " << seed << " analytic " << r.worst_analytic
                                       << " numeric " << r.worst_numeric;
    }
  }
}

TEST(Autodiff, DeterministicForwardAndBackward) {
  auto run = [] {
    Rng rng(42);
    Tape<double> t;
    auto a = t.leaf(random_array({8, 8}, rng));
    auto b = t.leaf(random_array({8, 8}, rng));
    auto y = sum(gelu(layernorm(matmul(a, b), t.constant({8}, std::vector<double>(8, 1.0)),
                                t.constant({8}, std::vector<double>(8, 0.0)))));
    t.backward(y);
    auto g = t.grad(a);
    g.push_back(y.item());
    return g;
  };
  EXPECT_EQ(run(), run());
}

TEST(Autodiff, BackwardVisitsEachNodeOnce) {
  Tape<double> t;
  Rng rng(3);
  auto x = t.leaf(random_array({4, 4}, rng));
  auto c = t.constant(random_array({4, 4}, rng));
  Var<double> y = x;
  for (int i = 0; i < 20; ++i) y = add(matmul(y, c), x);
  auto root = mean(y);
  t.backward(root);
  std::size_t grad_nodes = 0;
  for (std::uint32_t i = 0; i < t.size(); ++i) grad_nodes += t.node(i).requires_grad;
  EXPECT_EQ(t.visits(), grad_nodes);
  EXPECT_EQ(t.visits(), 1u + 2 * 20 + 2);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  ParamStore<double> ps;
  Rng rng(4);
  auto& w = ps.add("layer.w", {3, 2}, ParamGroup::transformer, true);
  for (auto& v : w.data) v = rng.normal();
  auto& b = ps.add("embed.b", {5}, ParamGroup::embed, false);
  for (auto& v : b.data) v = rng.normal();
  auto bytes = encode_checkpoint(ps, R"({"d_model":4})");
  auto ck = decode_checkpoint(bytes);
  EXPECT_EQ(ck.metadata, R"({"d_model":4})");
  ASSERT_EQ(ck.records.size(), 2u);
  EXPECT_EQ(ck.records[0].name, "layer.w");
  EXPECT_EQ(ck.records[0].value.shape, (Shape{3, 2}));
  ParamStore<double> loaded = ps;
  for (auto& p : loaded) std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
  load_into(loaded, ck);
  EXPECT_EQ(encode_checkpoint(loaded, ck.metadata), bytes);
  EXPECT_EQ(bytes.substr(0, 8), "SEWCKPT1");

  auto corrupt = bytes;
  corrupt[20] ^= 1;
  EXPECT_THROW(decode_checkpoint(corrupt), CheckpointCorrupt);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), CheckpointCorrupt);
}
