#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "afferent/memory_amm.hpp"

using namespace afferent;
using Catch::Approx;

namespace {

StepRecord rec(double x, double cat, double delta_d, std::size_t m = 2) {
  return {{x, 0.5 * x, 0.1}, Vec(m, cat), cat, 0.5, delta_d};
}

Vec unit(Vec v) {
  const double n = norm2(v);
  for (double& x : v) x /= n;
  return v;
}

Episode episode(Vec key, double delta) {
  Episode e;
  e.key = unit(std::move(key));
  e.delta = delta;
  return e;
}

}  // namespace

TEST_CASE("key encoding") {
  SECTION("dimension is 2K+M+1 and the key is unit norm") {
    std::vector<StepRecord> w{rec(0.1, 0.2, 0.0, 5), rec(0.3, 0.4, 0.0, 5), rec(0.2, 0.1, 0.0, 5)};
    const EncodedKey k = encode_key(w);
    CHECK(k.key.size() == 2 * 3 + 5 + 1);
    CHECK(norm2(k.key) == Approx(1.0).margin(1e-12));
    CHECK(k.mean_cat == Approx((0.2 + 0.4 + 0.1) / 3.0));
  }
  SECTION("a constant window has a zero velocity block") {
    std::vector<StepRecord> w(6, rec(0.4, 0.3, 0.0));
    const EncodedKey k = encode_key(w);
    for (std::size_t i = 3 + 2 + 1; i < k.key.size(); ++i) CHECK(k.key[i] == 0.0);
  }
  SECTION("velocity is (last - first) / (n - 1) before normalization") {
    std::vector<StepRecord> w{rec(0.0, 0.0, 0.0), rec(0.5, 0.0, 0.0), rec(1.0, 0.0, 0.0)};
    const EncodedKey k = encode_key(w);
    // raw key: mean x = (0.5, 0.25, 0.1), activations 0, cat 0, velocity (0.5, 0.25, 0)
    const Vec raw{0.5, 0.25, 0.1, 0.0, 0.0, 0.0, 0.5, 0.25, 0.0};
    const Vec expected = unit(raw);
    for (std::size_t i = 0; i < raw.size(); ++i) CHECK(k.key[i] == Approx(expected[i]).margin(1e-12));
  }
  SECTION("fewer than two steps is an error") {
    std::vector<StepRecord> w{rec(0.1, 0.1, 0.0)};
    CHECK_THROWS_AS(encode_key(w), ValidationError);
  }
}

TEST_CASE("capture trigger") {
  MemoryParams p;
  SECTION("quiet steps never capture") {
    MemoryStore s(p);
    for (int t = 0; t < 50; ++t) CHECK_FALSE(s.observe(rec(0.1, 0.3, 0.0), "normal", t));
    s.end_trajectory();
    CHECK(s.size() == 0);
  }
  SECTION("damage exactly at the threshold does not capture") {
    MemoryStore s(p);
    s.observe(rec(0.1, 0.3, 0.0), "normal", 0);
    CHECK_FALSE(s.observe(rec(0.1, 0.3, p.eps_d), "normal", 1));
    CHECK(s.observe(rec(0.1, 0.3, std::nextafter(p.eps_d, 1.0)), "normal", 2));
  }
  SECTION("CAT exactly at the threshold does not capture") {
    MemoryStore s(p);
    s.observe(rec(0.1, 0.3, 0.0), "normal", 0);
    CHECK_FALSE(s.observe(rec(0.1, p.kappa_cat, 0.0), "normal", 1));
    CHECK(s.observe(rec(0.1, 0.71, 0.0), "normal", 2));
  }
  SECTION("the very first step cannot capture") {
    MemoryStore s(p);
    CHECK_FALSE(s.observe(rec(0.1, 0.9, 0.5), "normal", 0));
  }
}

TEST_CASE("future damage is the hand-summed horizon") {
  MemoryParams p;
  MemoryStore s(p);
  const Vec dd{0.0, 0.0, 0.002, 0.0004, 0.0, 0.0007, 0.0001, 0.0, 0.0003, 0.0, 0.0009, 0.0002, 0.0008, 0.0};
  for (std::size_t t = 0; t < dd.size(); ++t) s.observe(rec(0.2, 0.3, dd[t]), "acl_deficient", static_cast<std::int64_t>(t));
  // Capture at t=2 (0.002 > 1e-3); horizon covers t=2..11.
  REQUIRE(s.size() == 1);
  double expected = 0.0;
  for (std::size_t t = 2; t < 12; ++t) expected += dd[t];
  const Episode& e = s.episodes().front();
  CHECK(e.delta == Approx(expected).margin(1e-15));
  CHECK(e.t_event == 2);
  CHECK(e.scenario == "acl_deficient");
  CHECK(e.finalized);
}

TEST_CASE("truncated episodes keep their partial sum") {
  MemoryStore s;
  s.observe(rec(0.2, 0.3, 0.0), "normal", 0);
  s.observe(rec(0.2, 0.3, 0.01), "normal", 1);
  s.observe(rec(0.2, 0.3, 0.0005), "normal", 2);
  CHECK(s.size() == 0);
  s.end_trajectory();
  REQUIRE(s.size() == 1);
  CHECK(s.episodes().front().delta == Approx(0.0105).margin(1e-15));
}

TEST_CASE("retrieval") {
  MemoryStore s;
  SECTION("single episode") {
    s.insert(episode({1.0, 0.0, 0.0}, 0.4));
    const Vec q = unit({1.0, 1.0, 0.0});
    const auto r = s.retrieve(q);
    REQUIRE(r.size() == 1);
    CHECK(r[0].distance == Approx(1.0 - std::sqrt(0.5)).margin(1e-12));
  }
  SECTION("stored key as query comes first at distance 0") {
    for (int i = 0; i < 10; ++i) s.insert(episode({std::cos(0.3 * i), std::sin(0.3 * i), 0.2}, i));
    const Vec q = s.episodes()[4].key;
    const auto r = s.retrieve(q);
    CHECK(r.front().episode == &s.episodes()[4]);
    CHECK(r.front().distance == Approx(0.0).margin(1e-12));
  }
  SECTION("ties go to the older episode") {
    s.insert(episode({0.0, 1.0, 0.0}, 1.0));
    s.insert(episode({1.0, 0.0, 0.0}, 2.0));
    s.insert(episode({1.0, 0.0, 0.0}, 3.0));
    const auto r = s.retrieve(Vec{1.0, 0.0, 0.0}, 2);
    CHECK(r[0].episode->delta == 2.0);
    CHECK(r[1].episode->delta == 3.0);
  }
  SECTION("matches an exhaustive oracle on random stores") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
      MemoryStore st;
      for (int i = 0; i < 50; ++i) st.insert(episode({rng.normal(), rng.normal(), rng.normal(), rng.normal()}, rng.uniform()));
      const Vec q = unit({rng.normal(), rng.normal(), rng.normal(), rng.normal()});
      std::vector<std::pair<double, const Episode*>> all;
      for (const auto& e : st.episodes()) {
        double c = 0.0;
        for (std::size_t j = 0; j < 4; ++j) c += q[j] * e.key[j];
        all.push_back({1.0 - c, &e});
      }
      std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      const auto got = st.retrieve(q);
      REQUIRE(got.size() == 5);
      for (std::size_t j = 0; j < 5; ++j) CHECK(got[j].episode == all[j].second);
    }
  }
}

TEST_CASE("recall risk") {
  CHECK(recall_risk({}).y_hat == 0.0);
  CHECK(recall_risk({}).d_mean == 0.0);
  Episode a;
  a.delta = 0.7;
  const std::vector<Retrieved> one{{&a, 0.3}};
  CHECK(recall_risk(one).y_hat == Approx(0.7).margin(1e-15));
  CHECK(recall_risk(one).d_mean == Approx(0.3).margin(1e-15));
  Episode b, c;
  b.delta = 1.0;
  c.delta = 3.0;
  const std::vector<Retrieved> two{{&b, 0.1}, {&c, 0.3}};
  CHECK(recall_risk(two).y_hat == Approx(1.5000024999875001).margin(1e-12));
  CHECK(recall_risk(two).y_hat == Approx(1.5).margin(1e-4));
  CHECK(recall_risk(two).d_mean == Approx(0.2));
}

TEST_CASE("recall risk lies within the retrieved damage range") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Episode> eps(1 + rng.below(6));
    std::vector<Retrieved> r;
    double lo = 1e9, hi = -1e9;
    for (auto& e : eps) {
      e.delta = rng.uniform(0.0, 2.0);
      lo = std::min(lo, e.delta);
      hi = std::max(hi, e.delta);
      r.push_back({&e, rng.uniform(0.0, 2.0)});
    }
    const double y = recall_risk(r).y_hat;
    CHECK(y >= lo - 1e-12);
    CHECK(y <= hi + 1e-12);
  }
}

TEST_CASE("FIFO eviction at capacity") {
  MemoryParams p;
  p.capacity = 4;
  MemoryStore s(p);
  for (int i = 0; i < 10; ++i) s.insert(episode({1.0, 0.1 * i}, i));
  CHECK(s.size() == 4);
  CHECK(s.episodes().front().delta == 6.0);
  CHECK(s.episodes().back().delta == 9.0);
  CHECK(s.inserted() == 10);
}

TEST_CASE("memory bias") {
  MemoryStore s;
  CHECK(apply_memory_bias(0.2, s, "normal") == 0.2);
  for (int i = 0; i < 3; ++i) {
    Episode e = episode({1.0, 0.0}, 0.1);
    e.cat_hist = 0.8;
    e.scenario = "normal";
    s.insert(e);
  }
  CHECK(apply_memory_bias(0.2, s, "normal") == Approx(0.38).margin(1e-15));
  CHECK(apply_memory_bias(0.8, s, "normal") == Approx(0.8).margin(1e-15));
  CHECK(apply_memory_bias(0.2, s, "acl_deficient") == 0.2);
}

TEST_CASE("merge concatenates in order and re-evicts") {
  MemoryParams p;
  p.capacity = 5;
  MemoryStore a(p), b(p);
  for (int i = 0; i < 3; ++i) a.insert(episode({1.0, 0.0}, i));
  for (int i = 0; i < 4; ++i) b.insert(episode({0.0, 1.0}, 10 + i));
  const MemoryStore m = merge_stores(a, b);
  CHECK(m.size() == 5);
  CHECK(m.episodes().front().delta == 2.0);
  CHECK(m.episodes().back().delta == 13.0);
}

TEST_CASE("identical observation streams build identical stores") {
  auto build = [] {
    MemoryStore s;
    Rng rng(77);
    for (int t = 0; t < 400; ++t) {
      s.observe(rec(rng.uniform(), rng.uniform(), rng.uniform() < 0.1 ? 0.01 : 0.0), "normal", t);
    }
    s.end_trajectory();
    return s;
  };
  const MemoryStore a = build();
  const MemoryStore b = build();
  REQUIRE(a.size() == b.size());
  CHECK(a.size() > 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.episodes()[i].key == b.episodes()[i].key);
    CHECK(a.episodes()[i].delta == b.episodes()[i].delta);
  }
}

TEST_CASE("invalid parameters") {
  MemoryParams p;
  p.capacity = 0;
  CHECK_THROWS_AS(MemoryStore(p), ConfigError);
  p = {};
  p.k_ret = 0;
  CHECK_THROWS_AS(MemoryStore(p), ConfigError);
}
