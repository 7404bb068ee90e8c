#include <cmath>
#include <numeric>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "volssl/autograd.hpp"
#include "volssl/nn.hpp"

using namespace volssl;
using volssl::testing::grad_check;

namespace {

Tensor rand_tensor(std::vector<Index> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

// Random projection so each check sees a generic scalar objective.
Var project(const Var& x, std::uint64_t seed) {
  Rng rng(seed);
  return ag::sum(ag::mul(x, ag::constant(rand_tensor(x.value().shape(), rng))));
}

void check(ParameterSet& ps, const std::function<Var()>& f, int count = 12) {
  Rng rng(99);
  const auto r = grad_check(ps, f, count, rng);
  INFO(r.worst);
  CHECK(r.checked == count);
  CHECK(r.max_rel_error < 1e-6);
}

}  // namespace

TEST_CASE("dense ops match finite differences") {
  Rng rng(1);
  ParameterSet ps;
  ps.add("x", rand_tensor({5, 4}, rng));
  ps.add("w", rand_tensor({4, 3}, rng));
  ps.add("b", rand_tensor({3}, rng));
  ps.add("y", rand_tensor({6, 4}, rng));
  const Tensor r1 = rand_tensor({5, 3}, rng), r2 = rand_tensor({5, 6}, rng);
  check(ps, [&] {
    const Var lin = ag::linear(ps.at("x"), ps.at("w"), ps.at("b"));
    const Var mm = ag::matmul_nt(ps.at("x"), ps.at("y"));
    return ag::add(ag::sum(ag::mul(ag::gelu(lin), ag::constant(r1))), ag::mean(ag::mul(ag::leaky_relu(mm, 0.1), ag::constant(r2))));
  });
}

TEST_CASE("normalisation ops match finite differences") {
  Rng rng(2);
  ParameterSet ps;
  ps.add("x", rand_tensor({6, 5}, rng));
  ps.add("g", rand_tensor({5}, rng));
  ps.add("b", rand_tensor({5}, rng));
  Rng proj(3);
  const Tensor a = rand_tensor({6, 5}, proj), b = rand_tensor({6, 5}, proj), c = rand_tensor({6, 5}, proj);
  check(ps, [&] {
    const Var ln = ag::layer_norm(ps.at("x"), ps.at("g"), ps.at("b"));
    const Var in = ag::instance_norm(ps.at("x"), ps.at("g"), ps.at("b"));
    const Var l2 = ag::l2_normalize_rows(ps.at("x"));
    return ag::add(ag::add(ag::sum(ag::mul(ln, ag::constant(a))), ag::sum(ag::mul(in, ag::constant(b)))), ag::sum(ag::mul(l2, ag::constant(c))));
  });
}

TEST_CASE("row bookkeeping ops match finite differences") {
  Rng rng(4);
  ParameterSet ps;
  ps.add("x", rand_tensor({8, 3}, rng));
  ps.add("y", rand_tensor({8, 2}, rng));
  ps.add("e", rand_tensor({1, 3}, rng));
  const std::vector<Index> rows{1, 5, 5, 7};
  const std::vector<std::uint8_t> mask{0, 1, 0, 0, 1, 1, 0, 0};
  Rng proj(5);
  const Tensor a = rand_tensor({8, 5}, proj), b = rand_tensor({4, 3}, proj), c = rand_tensor({8, 3}, proj), d = rand_tensor({16, 3}, proj);
  check(ps, [&] {
    const Var cat = ag::concat_cols(ps.at("x"), ps.at("y"));
    const Var sel = ag::select_rows(ps.at("x"), rows);
    const Var rep = ag::replace_rows(ps.at("x"), mask, ps.at("e"));
    const std::vector<Var> parts{ps.at("x"), rep};
    const Var st = ag::stack_rows(parts);
    Var s = ag::sum(ag::mul(cat, ag::constant(a)));
    s = ag::add(s, ag::sum(ag::mul(sel, ag::constant(b))));
    s = ag::add(s, ag::sum(ag::mul(st, ag::constant(d))));
    s = ag::add(s, ag::sum(ag::mul(ag::mean_rows(rep), ag::constant(Tensor::matrix(1, 3, 0.7)))));
    return ag::add(s, ag::sum(ag::mul(rep, ag::constant(c))));
  });
}

TEST_CASE("space_to_depth and depth_to_space are inverse permutations") {
  Rng rng(6);
  const Shape3 grid{4, 2, 6};
  const Tensor x = rand_tensor({48, 3}, rng);
  const Var down = ag::space_to_depth(ag::constant(x), grid, {2, 2, 2});
  CHECK(down.value().shape() == std::vector<Index>{6, 24});
  const Var up = ag::depth_to_space(down, {2, 1, 3}, {2, 2, 2});
  CHECK(up.value().storage() == x.storage());
}

TEST_CASE("conv3d equals a direct loop and matches finite differences") {
  Rng rng(7);
  const Shape3 g{3, 4, 2};
  const Index cin = 2, cout = 3;
  ParameterSet ps;
  ps.add("x", rand_tensor({24, cin}, rng));
  ps.add("w", rand_tensor({27 * cin, cout}, rng, 0.3));
  ps.add("b", rand_tensor({cout}, rng));
  const Tensor y = ag::conv3d(ps.at("x"), g, ps.at("w"), ps.at("b"), 3).value();
  for (Index d = 0; d < g[0]; ++d)
    for (Index h = 0; h < g[1]; ++h)
      for (Index w = 0; w < g[2]; ++w)
        for (Index o = 0; o < cout; ++o) {
          double acc = ps.at("b").value()[o];
          for (Index kd = 0; kd < 3; ++kd)
            for (Index kh = 0; kh < 3; ++kh)
              for (Index kw = 0; kw < 3; ++kw) {
                const Index sd = d + kd - 1, sh = h + kh - 1, sw = w + kw - 1;
                if (sd < 0 || sh < 0 || sw < 0 || sd >= g[0] || sh >= g[1] || sw >= g[2]) continue;
                const Index tap = (kd * 3 + kh) * 3 + kw, src = (sd * g[1] + sh) * g[2] + sw;
                for (Index c = 0; c < cin; ++c) acc += ps.at("x").value()[src * cin + c] * ps.at("w").value()[(tap * cin + c) * cout + o];
              }
          CHECK(y[((d * g[1] + h) * g[2] + w) * cout + o] == doctest::Approx(acc).epsilon(1e-12));
        }
  check(ps, [&] { return project(ag::conv3d(ps.at("x"), g, ps.at("w"), ps.at("b"), 3), 8); });
}

TEST_CASE("shifted window attention matches finite differences") {
  Rng rng(9);
  const Index c = 4;
  const ag::WindowGeometry geom{{4, 4, 2}, {2, 2, 2}, {1, 1, 0}};
  ParameterSet ps;
  ps.add("qkv", rand_tensor({32, 3 * c}, rng));
  ps.add("table", rand_tensor({27, 2}, rng, 0.1));
  check(ps, [&] { return project(ag::window_attention(ps.at("qkv"), geom, 2, ps.at("table")), 10); });
}

TEST_CASE("loss primitives match finite differences") {
  Rng rng(11);
  ParameterSet ps;
  ps.add("z", rand_tensor({6, 4}, rng));
  ps.add("p", rand_tensor({6, 3}, rng));
  const std::vector<int> labels{0, 3, 1, 1, 2, 0};
  const std::vector<int> classes{1, 2, 3};
  const std::vector<int> partner{1, 0, 3, 2, 5, 4};
  const std::vector<double> rw{1, 0, 2, 1, 0.5, 1};
  const Tensor target = rand_tensor({6, 3}, rng);
  const Tensor probs = softmax_rows(rand_tensor({6, 4}, rng));
  check(ps, [&] {
    Var s = ag::cross_entropy(ps.at("z"), labels);
    s = ag::add(s, ag::soft_dice(ps.at("z"), labels, classes));
    s = ag::add(s, ag::soft_cross_entropy(ps.at("z"), probs, 0.3));
    s = ag::add(s, ag::weighted_mse(ps.at("p"), target, rw));
    const Var n = ag::l2_normalize_rows(ps.at("p"));
    return ag::add(s, ag::info_nce(ag::matmul_nt(n, n), partner, 0.5));
  });
}

TEST_CASE("cross_entropy rejects labels outside the class range") {
  const Var z = ag::constant(Tensor::matrix(2, 3, 0.0));
  const std::vector<int> bad{0, 3};
  CHECK_THROWS_AS(ag::cross_entropy(z, bad), std::out_of_range);
}

TEST_CASE("weighted_sum is the exact weighted combination") {
  const std::vector<Var> t{ag::constant(Tensor::scalar(0.3)), ag::constant(Tensor::scalar(1.7)), ag::constant(Tensor::scalar(-2.0))};
  const std::vector<double> w{1.0, 0.1, 0.25};
  CHECK(ag::weighted_sum(t, w).value().item() == 0.3 * 1.0 + 1.7 * 0.1 + -2.0 * 0.25);
}

TEST_CASE("NoGradGuard stops graph recording") {
  Var p(Tensor::matrix(2, 2, 1.0), true);
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    const Var y = ag::sum(ag::mul(p, p));
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(grad_enabled());
  backward(ag::sum(ag::mul(p, p)));
  CHECK(p.grad()[0] == 2.0);
}

TEST_CASE("kink recorder logs leaky_relu input signs on its own thread scope") {
  const Var x = ag::constant(Tensor({4}, std::vector<double>{-1.0, 2.0, 0.0, 3.0}));
  std::vector<std::uint8_t> outer;
  {
    KinkRecorder rec;
    ag::leaky_relu(x);
    {
      KinkRecorder inner;
      ag::leaky_relu(x);
      CHECK(inner.signs() == std::vector<std::uint8_t>{0, 1, 0, 1});
    }
    outer = rec.signs();
  }
  CHECK(outer == std::vector<std::uint8_t>{0, 1, 0, 1});

  ParameterSet ps;
  ps.add("x", Tensor({2}, std::vector<double>{0.3, 4e-6}));
  Rng rng(3);
  const auto r = grad_check(ps, [&] { return ag::sum(ag::leaky_relu(ps.at("x"))); }, 10, rng);
  CHECK(r.checked == 10);
  CHECK(r.kinked > 0);
  CHECK(r.max_rel_error < 1e-10);
}
