#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <map>
#include <random>
#include <set>

#include "tstream/errors.hpp"
#include "tstream/strategy.hpp"

using namespace tstream;
using namespace tstream::strategy;

namespace {

metrics::DetectionSet tagged(int frame) {
  metrics::DetectionSet s;
  s.frame_index = frame;
  return s;
}

DelayEstimate estimate_of(double total_seconds) {
  DelayEstimate e;
  e.components.backbone = total_seconds;
  return e;
}

}  // namespace

TEST_CASE("ema_update") {
  const ComponentDelays a{0.010, 0.004, 0.002, 0.001};
  const ComponentDelays b{0.030, 0.008, 0.004, 0.003};

  SUBCASE("first observation is adopted") {
    const auto e = ema_update(std::nullopt, a);
    CHECK(e.components == a);
  }
  SUBCASE("halfway mix") {
    const auto e = ema_update(ema_update(std::nullopt, a), b);
    CHECK(e.components.backbone == doctest::Approx(0.020));
    CHECK(e.components.neck == doctest::Approx(0.006));
    CHECK(e.components.head == doctest::Approx(0.003));
    CHECK(e.components.other == doctest::Approx(0.002));
    CHECK(e.total() == doctest::Approx(0.031));
  }
  SUBCASE("decay weights the previous value") {
    const auto e = ema_update(ema_update(std::nullopt, a), b, 0.75);
    CHECK(e.components.backbone == doctest::Approx(0.75 * 0.010 + 0.25 * 0.030));
  }
  SUBCASE("negative component rejected") {
    CHECK_THROWS_AS(ema_update(std::nullopt, {0.01, -1e-6, 0.0, 0.0}), ContractError);
  }
  SUBCASE("total equals the component sum after many updates") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 0.1);
    std::optional<DelayEstimate> e;
    for (int n = 0; n < 50; ++n) {
      e = ema_update(e, {u(rng), u(rng), u(rng), u(rng)});
      const auto& c = e->components;
      CHECK(e->total() == c.backbone + c.neck + c.head + c.other);
    }
  }
}

TEST_CASE("plan: past selection") {
  PlannerConfig cfg;
  cfg.max_past = 3;
  const auto p = plan(std::vector<int>{-5, -3, -2, -1}, estimate_of(0.02), 0, cfg);
  CHECK(p.proposal.past == std::vector<int>{-3, -2, -1});
  CHECK_FALSE(p.synthetic_past);

  SUBCASE("indices are relative to the current frame") {
    const auto q = plan(std::vector<int>{95, 97, 98, 99}, estimate_of(0.02), 100, cfg);
    CHECK(q.proposal.past == std::vector<int>{-3, -2, -1});
  }
  SUBCASE("cold start") {
    const auto q = plan(std::vector<int>{}, estimate_of(0.0), 0, cfg);
    CHECK(q.proposal.past == std::vector<int>{-1});
    CHECK(q.synthetic_past);
    CHECK(q.proposal.future == std::vector<int>{1, 2, 3, 4});
  }
  SUBCASE("buffered index at or after now is a contract error") {
    CHECK_THROWS_AS(plan(std::vector<int>{1, 2}, estimate_of(0.02), 2, cfg), ContractError);
  }
}

TEST_CASE("plan: future selection") {
  PlannerConfig cfg;
  SUBCASE("34 ms at 30 fps, two horizons") {
    cfg.max_future = 2;
    const auto p = plan(std::vector<int>{-1}, estimate_of(0.034), 0, cfg);
    CHECK(p.proposal.future == std::vector<int>{2, 3});
  }
  SUBCASE("candidate beyond the clip is clamped") {
    cfg.max_future = 1;
    const auto p = plan(std::vector<int>{-1}, estimate_of(25.0 / 30.0), 0, cfg);
    CHECK(p.proposal.future == std::vector<int>{19});
  }
  SUBCASE("clamped candidates are deduplicated") {
    const auto p = plan(std::vector<int>{-1}, estimate_of(0.5), 0, cfg);  // 15, 30, 45, 60
    CHECK(p.proposal.future == std::vector<int>{15, 19});
  }
  SUBCASE("startup delay counts toward the first horizon") {
    cfg.max_future = 1;
    DelayEstimate e = estimate_of(0.02);
    e.startup = 0.02;  // 1.2 frames in total
    CHECK(plan(std::vector<int>{-1}, e, 0, cfg).proposal.future == std::vector<int>{2});
  }
  SUBCASE("stride follows the estimate") {
    const auto p = plan(std::vector<int>{-1}, estimate_of(2.4 / 30.0), 0, cfg);
    CHECK(p.proposal.future == std::vector<int>{3, 5, 7, 9});
  }
}

TEST_CASE("plan: first horizon equals ceil(D k) across a delay sweep") {
  PlannerConfig cfg;
  cfg.max_future = 1;
  // D = n / 30000 s, so D * 30 = n / 1000 and the ceiling is integer arithmetic.
  for (std::int64_t n = 1; n <= 20000; n += 7) {
    const double d = static_cast<double>(n) / 30000.0;
    const int expected = static_cast<int>(std::min<std::int64_t>((n + 999) / 1000, 19));
    const auto p = plan(std::vector<int>{-1}, estimate_of(d), 0, cfg);
    REQUIRE(p.proposal.future.size() == 1);
    CHECK_MESSAGE(p.proposal.future[0] == std::max(expected, 1), "n=" << n);
  }
}

TEST_CASE("plan: output is always a valid proposal") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> delay(0.0, 1.2);
  std::uniform_int_distribution<int> gap(1, 12);
  for (int trial = 0; trial < 300; ++trial) {
    PlannerConfig cfg;
    cfg.max_past = 1 + trial % 4;
    cfg.max_future = 1 + (trial / 4) % 4;
    cfg.stride = trial % 2 ? StrideRule::kRecentPeak : StrideRule::kEstimate;
    std::vector<int> buffered;
    int idx = 0;
    for (int n = 0; n < trial % 6; ++n) buffered.push_back(idx += gap(rng));
    const int now = idx + gap(rng);
    DelayEstimate e = estimate_of(delay(rng));
    e.startup = delay(rng) / 30.0;
    const auto p = plan(buffered, e, now, cfg, std::deque<double>{delay(rng), delay(rng)});
    CHECK_NOTHROW(p.proposal.validate());
    CHECK(p.proposal.past.size() <= cfg.max_past);
    CHECK(p.proposal.future.size() <= cfg.max_future);
    CHECK(p.proposal.past.front() >= cfg.clip_min);
    CHECK(p.proposal.future.back() <= cfg.clip_max);
    CHECK(p.synthetic_past == buffered.empty());
  }
}

TEST_CASE("plan: skipped-frame example with horizons {1,3}") {
  // Loops on frames -4, -2, -1 under drop-in-flight scheduling; the 1.6-frame
  // loop on -4 makes frame -3 arrive mid-inference.
  const std::int64_t tpf = 1000;  // ticks per frame
  const std::vector<std::int64_t> delays = {1600, 500, 500};
  std::vector<int> processed;
  std::int64_t frame = -4;
  PlannerConfig cfg;
  cfg.max_past = 3;
  cfg.max_future = 2;
  cfg.stride = StrideRule::kRecentPeak;
  DelayTracker tracker(cfg);
  for (std::int64_t d : delays) {
    processed.push_back(static_cast<int>(frame));
    const std::int64_t finish = frame * tpf + d;
    tracker.observe({static_cast<double>(d) / (tpf * cfg.frame_rate), 0.0, 0.0, 0.0});
    // first frame arriving at or after finish
    frame = finish >= 0 ? (finish + tpf - 1) / tpf : -((-finish) / tpf);
  }
  REQUIRE(frame == 0);
  CHECK(processed == std::vector<int>{-4, -2, -1});
  const auto p = plan(processed, tracker.estimate(0.0), 0, cfg, tracker.recent_totals());
  CHECK(p.proposal.past == std::vector<int>{-4, -2, -1});
  CHECK(p.proposal.future == std::vector<int>{1, 3});

  SUBCASE("the estimate-based stride cannot pair f1 = 1 with stride 2") {
    PlannerConfig est = cfg;
    est.stride = StrideRule::kEstimate;
    for (int n = 1; n <= 1000; ++n) {
      const auto q = plan(processed, estimate_of(n / 30000.0), 0, est);
      CHECK(q.proposal.future == std::vector<int>{1, 2});
    }
  }
}

TEST_CASE("DelayTracker") {
  PlannerConfig cfg;
  cfg.peak_window = 2;
  DelayTracker t(cfg);
  CHECK_FALSE(t.ready());
  CHECK(t.estimate(0.01).total() == 0.0);
  CHECK(t.estimate(0.01).startup == 0.01);
  t.observe({0.03, 0, 0, 0});
  t.observe({0.01, 0, 0, 0});
  t.observe({0.02, 0, 0, 0});
  CHECK(t.ready());
  CHECK(t.estimate(0.0).total() == doctest::Approx(0.5 * (0.5 * 0.03 + 0.5 * 0.01) + 0.5 * 0.02));
  CHECK(t.recent_totals() == std::deque<double>{0.01, 0.02});
}

TEST_CASE("FeatureBuffer") {
  FeatureBuffer b(4);
  for (int i = 1; i <= 8; ++i) b.push(i, FeatureMap{i, {}});
  CHECK(b.indices() == std::vector<int>{5, 6, 7, 8});
  CHECK(b.at(7).source_index == 7);
  CHECK_THROWS_AS(b.at(4), ContractError);
  CHECK_THROWS_AS(b.push(8, FeatureMap{}), ContractError);
  CHECK_THROWS_AS(b.push(3, FeatureMap{}), ContractError);
  CHECK(b.size() == 4);
  CHECK_THROWS_AS(FeatureBuffer(0), ConfigError);

  SUBCASE("gaps are kept") {
    FeatureBuffer g(3);
    for (int i : {0, 3, 4, 9}) g.push(i, FeatureMap{i, {}});
    CHECK(g.indices() == std::vector<int>{3, 4, 9});
  }
}

TEST_CASE("OutputBuffer") {
  OutputBuffer ob;
  CHECK_FALSE(ob.dispatch(0).has_value());
  ob.push({{1, tagged(1)}, {3, tagged(3)}});

  SUBCASE("tie goes to the later target") {
    const auto d = ob.dispatch(2);
    REQUIRE(d);
    CHECK(d->first == 3);
    CHECK(ob.size() == 2);  // target 3 > 2 stays
  }
  SUBCASE("entries at or before q retire") {
    CHECK(ob.dispatch(1)->first == 1);
    CHECK(ob.size() == 1);
    CHECK(ob.dispatch(5)->first == 3);
    CHECK(ob.size() == 0);
    CHECK_FALSE(ob.dispatch(6).has_value());
  }
  SUBCASE("later push overwrites a target") {
    metrics::DetectionSet s = tagged(3);
    s.boxes.push_back({0, 0, 1, 1, 0, 0.5});
    ob.push({{3, s}});
    CHECK(ob.dispatch(3)->second.boxes.size() == 1);
  }
  SUBCASE("duplicate target in one push") {
    CHECK_THROWS_AS(ob.push({{5, tagged(5)}, {5, tagged(5)}}), ContractError);
    CHECK(ob.size() == 2);
  }
}

TEST_CASE("OutputBuffer: dispatch matches a brute-force nearest search") {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<int> target(0, 60);
  OutputBuffer ob;
  std::map<int, int> mirror;  // target -> push generation
  int generation = 0;
  for (int q = 0; q < 60; ++q) {
    if (q % 3 == 0) {
      std::vector<std::pair<int, metrics::DetectionSet>> batch;
      std::set<int> used;
      for (int n = 0; n < 3; ++n) {
        const int t = target(rng);
        if (!used.insert(t).second) continue;
        metrics::DetectionSet s = tagged(t);
        s.boxes.push_back({0, 0, 1, 1, 0, static_cast<double>(generation)});
        batch.emplace_back(t, s);
        mirror[t] = generation;
      }
      ++generation;
      ob.push(batch);
    }
    std::optional<int> want;
    for (const auto& [t, g] : mirror) {
      if (!want || std::abs(t - q) <= std::abs(*want - q)) want = t;
    }
    const auto got = ob.dispatch(q);
    REQUIRE(got.has_value() == want.has_value());
    if (!want) continue;
    CHECK(got->first == *want);
    CHECK(got->second.boxes[0].score == mirror[*want]);
    if (*want <= q) mirror.erase(*want);
    CHECK(ob.size() == mirror.size());
  }
}
