#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "support/oracles.hpp"
#include "volssl/metrics.hpp"
#include "volssl/nn.hpp"

using namespace volssl;
using Mask = std::vector<std::uint8_t>;

TEST_CASE("dice examples") {
  const Mask p{1, 1, 0, 0, 0, 0};
  const Mask g{1, 1, 1, 1, 0, 0};
  CHECK(dice(p, g) == doctest::Approx(4.0 / 6.0));
  CHECK(dice(g, g) == 1.0);
  CHECK(dice(Mask{1, 1, 0, 0}, Mask{0, 0, 1, 1}) == 0.0);
  CHECK(dice(Mask{0, 0}, Mask{0, 0}) == 1.0);
  CHECK_THROWS(dice(Mask{1}, Mask{1, 0}));
}

TEST_CASE("dice matches voxel counting and is symmetric") {
  Rng rng(0);
  for (int t = 0; t < 200; ++t) {
    Mask a(64), b(64);
    for (auto& x : a) x = rng.coin(0.3);
    for (auto& x : b) x = rng.coin(0.5);
    const double d = dice(a, b);
    CHECK(d == doctest::Approx(volssl::testing::dice_by_counting(a, b)).epsilon(1e-15));
    CHECK(d == dice(b, a));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }
}

TEST_CASE("dice reports score foreground classes and count undefined structures") {
  LabelMap gt{{1, 1, 4}, {0, 1, 1, 0}, {"background", "a", "b"}};
  LabelMap pred{{1, 1, 4}, {0, 1, 0, 0}, {"background", "a", "b"}};
  const DiceReport r = dice_report(pred, gt, {"a", "b"}, "v0");
  CHECK(r.per_structure.at("a") == doctest::Approx(2.0 / 3.0));
  CHECK(r.per_structure.at("b") == 1.0);
  CHECK(r.undefined == 1);
  CHECK(r.mean == doctest::Approx((2.0 / 3.0 + 1.0) / 2.0));
  CHECK(r.volume_id == "v0");
}

TEST_CASE("performance gap") {
  CHECK(performance_gap(0.8, 0.8) == 0.0);
  CHECK(performance_gap(0.72, 0.80) == doctest::Approx(-10.0));
  CHECK(performance_gap(0.82, 0.87) == doctest::Approx(-5.747126436781609));
  CHECK(std::round(performance_gap(0.82, 0.87) * 100.0) / 100.0 == doctest::Approx(-5.75));
  CHECK(performance_gap(0.9, 0.8) > 0.0);
  CHECK_THROWS(performance_gap(0.5, 0.0));
  for (double x : {0.1, 0.5, 0.99}) CHECK(performance_gap(x, x) == 0.0);
}

TEST_CASE("modality gap") {
  const std::map<std::string, double> a{{"x", 0.5}, {"y", 0.7}, {"z", 0.9}};
  CHECK(modality_gap(a, a) == std::map<std::string, double>{{"x", 0.0}, {"y", 0.0}, {"z", 0.0}});
  const auto g = modality_gap(a, {{"x", 0.55}, {"y", 0.6}, {"z", 0.95}});
  CHECK(g.at("x") == doctest::Approx(0.05));
  CHECK(g.at("y") == doctest::Approx(-0.1));
  CHECK(g.at("z") == doctest::Approx(0.05));
  try {
    modality_gap(a, {{"x", 0.5}, {"w", 0.1}, {"y", 0.1}});
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("w") != std::string::npos);
    CHECK(msg.find("z") != std::string::npos);
  }
}

TEST_CASE("wilcoxon examples") {
  const std::vector<double> a{1, 2, 3, 4, 5, 6};
  const WilcoxonResult same = wilcoxon_signed_rank(a, a);
  CHECK(same.p == 1.0);
  CHECK(same.degenerate);
  const std::vector<double> b{0.5, 1.2, 2.9, 3.0, 4.6, 5.2};
  const WilcoxonResult pos = wilcoxon_signed_rank(a, b);
  CHECK(pos.exact);
  CHECK(pos.n == 6);
  CHECK(pos.p == 0.03125);
  CHECK(wilcoxon_signed_rank(b, a).p == 0.03125);
  CHECK_THROWS(wilcoxon_signed_rank(std::vector<double>{1, 2, 3, 4}, std::vector<double>{0, 0, 0, 0}));
  CHECK_THROWS(wilcoxon_signed_rank(a, std::vector<double>{1, 2}));
}

TEST_CASE("exact wilcoxon equals the enumeration oracle") {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> z;
  std::uniform_int_distribution<int> len(5, 10);
  for (int t = 0; t < 100; ++t) {
    const int n = len(gen);
    std::vector<double> a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = std::round(z(gen) * 4.0) / 4.0;
      b[i] = std::round((z(gen) + 0.3) * 4.0) / 4.0;
    }
    int nonzero = 0;
    for (int i = 0; i < n; ++i) nonzero += a[i] != b[i];
    if (nonzero < 5) continue;
    const WilcoxonResult r = wilcoxon_signed_rank(a, b);
    CHECK(r.exact);
    CHECK(r.p == doctest::Approx(volssl::testing::wilcoxon_enumerated(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("exact wilcoxon p values match their null level") {
  constexpr int n = 10;
  std::vector<double> ps;
  for (int mask = 0; mask < (1 << n); ++mask) {
    std::vector<double> a(n), b(n, 0.0);
    for (int i = 0; i < n; ++i) a[i] = (mask >> i & 1) ? i + 1.0 : -(i + 1.0);
    ps.push_back(wilcoxon_signed_rank(a, b).p);
  }
  for (double c : ps) {
    if (c >= 1.0) continue;
    const auto hits = std::count_if(ps.begin(), ps.end(), [&](double q) { return q <= c + 1e-12; });
    CHECK(static_cast<double>(hits) / ps.size() == doctest::Approx(c).epsilon(1e-9));
  }
}

TEST_CASE("wilcoxon p values stay valid on gaussian null pairs") {
  std::mt19937_64 gen(2);
  std::normal_distribution<double> z;
  std::vector<double> ps;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> a(20), b(20);
    for (int i = 0; i < 20; ++i) {
      a[i] = z(gen);
      b[i] = z(gen);
    }
    const WilcoxonResult r = wilcoxon_signed_rank(a, b);
    CHECK(r.exact);
    ps.push_back(r.p);
  }
  for (double alpha : {0.01, 0.05, 0.1, 0.25, 0.5}) {
    const double rate = static_cast<double>(std::count_if(ps.begin(), ps.end(), [&](double q) { return q <= alpha; })) / 1000.0;
    CHECK(rate <= alpha + 3.0 * std::sqrt(alpha * (1.0 - alpha) / 1000.0));
  }
  CHECK(volssl::testing::ks_uniform(ps) < 0.08);
}

TEST_CASE("normal approximation above twenty pairs") {
  std::vector<double> a(30), b(30, 0.0);
  for (int i = 0; i < 30; ++i) a[i] = i + 1.0;
  const WilcoxonResult r = wilcoxon_signed_rank(a, b);
  CHECK(!r.exact);
  CHECK(r.w_plus == 465.0);
  const double mean = 30.0 * 31.0 / 4.0;
  const double sd = std::sqrt(30.0 * 31.0 * 61.0 / 24.0);
  CHECK(r.p == doctest::Approx(std::erfc((465.0 - mean) / sd / std::sqrt(2.0))));
}

TEST_CASE("structure grouping") {
  const std::map<std::string, double> s{{"a", 0.2}, {"b", 0.4}, {"c", 0.9}};
  CHECK(group_structures(s, {{"a", {"a"}}, {"b", {"b"}}, {"c", {"c"}}}) == s);
  CHECK(group_structures(s, {{"all", {"a", "b", "c"}}}).at("all") == doctest::Approx(0.5));
  const auto g = group_structures(s, {{"large", {"a", "b"}}, {"small", {"c"}}});
  CHECK(g.at("large") == doctest::Approx(0.3));
  CHECK(g.at("small") == 0.9);
  CHECK_THROWS(group_structures(s, {{"large", {"a", "b"}}}));
}

TEST_CASE("significance stars") {
  CHECK(significance_stars(0.0005) == "***");
  CHECK(significance_stars(0.005) == "**");
  CHECK(significance_stars(0.03) == "*");
  CHECK(significance_stars(0.05) == "");
  CHECK(significance_stars(0.5) == "");
}
