#include <filesystem>
#include <set>

#include "doctest.h"
#include "volssl/checkpoint.hpp"
#include "volssl/nn.hpp"

using namespace volssl;

TEST_CASE("Rng streams are reproducible and named substreams differ") {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next() == b.next());
  Rng s1 = Rng(42).substream("mask"), s2 = Rng(42).substream("init");
  CHECK(s1.next() != s2.next());
  CHECK(mix_seed(1, "x") == mix_seed(1, "x"));
  CHECK(mix_seed(1, "x") != mix_seed(2, "x"));
}

TEST_CASE("Rng state round-trips") {
  Rng r(5);
  r.next();
  const std::string st = r.state();
  const auto v = r.next();
  Rng q(0);
  q.restore(st);
  CHECK(q.next() == v);
}

TEST_CASE("below stays in range and covers it") {
  Rng r(3);
  std::set<Index> seen;
  for (int i = 0; i < 500; ++i) {
    const Index v = r.below(7);
    CHECK(v >= 0);
    CHECK(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
}

TEST_CASE("clone is deep and with_prefix shares leaves") {
  ParameterSet ps;
  ps.add("encoder.a", Tensor::matrix(2, 2, 1.0));
  ps.add("head.b", Tensor::matrix(1, 2, 2.0));
  ParameterSet c = ps.clone(false);
  c.at("encoder.a").mutable_value()[0] = 9.0;
  CHECK(ps.at("encoder.a").value()[0] == 1.0);
  CHECK_FALSE(c.at("encoder.a").requires_grad());
  ParameterSet e = ps.with_prefix("encoder.");
  CHECK(e.size() == 1);
  e.at("encoder.a").mutable_value()[1] = 5.0;
  CHECK(ps.at("encoder.a").value()[1] == 5.0);
  CHECK_THROWS(ps.merge(e));
}

TEST_CASE("require_compatible names the offending layer") {
  ParameterSet a, b;
  a.add("x", Tensor::matrix(2, 3));
  b.add("x", Tensor::matrix(3, 2));
  try {
    a.require_compatible(b);
    FAIL("expected a shape mismatch");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("x") != std::string::npos);
  }
}

TEST_CASE("AdamW decays matrices but not vectors") {
  ParameterSet ps;
  ps.add("w", Tensor::matrix(2, 2, 1.0));
  ps.add("b", Tensor({2}, 1.0));
  for (auto& [n, v] : ps.entries()) {
    Var x = v;
    x.mutable_grad() = Tensor(v.value().shape(), 0.0);
  }
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW opt(cfg);
  opt.step(ps, 0.5);
  CHECK(ps.at("w").value()[0] == doctest::Approx(1.0 - 0.5 * 0.1));
  CHECK(ps.at("b").value()[0] == 1.0);
}

TEST_CASE("cosine_lr warms up linearly and decays to the floor") {
  CHECK(cosine_lr(0, 100, 10, 1.0) == doctest::Approx(0.1));
  CHECK(cosine_lr(9, 100, 10, 1.0) == doctest::Approx(1.0));
  CHECK(cosine_lr(100, 100, 10, 1.0) == doctest::Approx(0.0));
  CHECK(cosine_lr(55, 100, 10, 1.0) == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("checkpoint archives round-trip exactly") {
  const auto dir = std::filesystem::temp_directory_path() / "volssl_ckpt_test";
  std::filesystem::remove_all(dir);
  Rng rng(1);
  ParameterSet ps;
  ps.add("encoder.w", trunc_normal({3, 4}, 0.02, rng));
  ps.add("encoder.b", trunc_normal({4}, 1.0, rng));
  CheckpointManifest m;
  m.kind = "pretrain";
  m.config_hash = "abc";
  m.step = 7;
  m.rng_state = rng.state();
  save_checkpoint(dir, ps, m);
  CheckpointManifest back;
  const ParameterSet loaded = load_checkpoint(dir, &back);
  CHECK(back.step == 7);
  CHECK(back.config_hash == "abc");
  CHECK(loaded.size() == 2);
  for (const auto& [n, v] : ps.entries()) {
    CHECK(loaded.at(n).value().shape() == v.value().shape());
    CHECK(loaded.at(n).value().storage() == v.value().storage());
  }
  std::filesystem::remove_all(dir);
}
