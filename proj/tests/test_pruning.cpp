// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <vector>

#include "helpers.hpp"
#include "vtp/pruning.hpp"
#include "vtp/rng.hpp"

using vtp::Vec;

namespace {

// Brute-force retention oracle: for each candidate prefix length j, re-sum the
// top-j scores from scratch and test the threshold. O(n^2) on purpose.
int oracle_retention(const Vec& scores, double theta, int min_retain) {
    const int n = static_cast<int>(scores.size());
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    int r = 0;
    for (int j = 1; j <= n; ++j) {
        double cum = 0.0;
        for (int i = 0; i < j; ++i) cum += scores[order[static_cast<std::size_t>(i)]];
        if (cum <= theta + vtp::kRetentionSlack) r = j;
    }
    return std::clamp(r, std::min(min_retain, n), n);
}

Vec vec3(double a, double b, double c) {
    Vec v(3);
    v << a, b, c;
    return v;
}

}  // namespace

TEST_CASE("retention_count hand examples") {
    const Vec a = vec3(.5, .3, .2);
    CHECK(vtp::retention_count(a, 1.0) == 3);
    CHECK(vtp::retention_count(a, 0.8) == 2);
    CHECK(vtp::retention_count(a, 0.4) == 1);  // empty set floors at min_retain
    CHECK(vtp::retention_count(a, 0.4, 2) == 2);
}

TEST_CASE("retention_count: theta=1 retains everything despite fp simplex slack") {
    vtp::Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const Vec a = testkit::random_simplex(rng, rng.uniform_int(1, 64));
        CHECK(vtp::retention_count(a, 1.0) == a.size());
    }
}

TEST_CASE("retention_count equals the linear-scan oracle exactly") {
    vtp::Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = rng.uniform_int(1, 64);
        const Vec a = testkit::random_simplex(rng, n);
        const double theta = rng.uniform(0.0, 1.0);
        REQUIRE(vtp::retention_count(a, theta) == oracle_retention(a, theta, 1));
    }
}

TEST_CASE("retention_count is non-decreasing in theta") {
    vtp::Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const Vec a = testkit::random_simplex(rng, rng.uniform_int(1, 32));
        double t1 = rng.uniform(0.0, 1.0);
        double t2 = rng.uniform(0.0, 1.0);
        if (t1 > t2) std::swap(t1, t2);
        REQUIRE(vtp::retention_count(a, t1) <= vtp::retention_count(a, t2));
    }
}

TEST_CASE("retention_count: concentrated scores collapse to min_retain") {
    vtp::Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = rng.uniform_int(2, 32);
        Vec a = testkit::random_simplex(rng, n) * 0.1;
        a[0] += 0.9;  // one dominant entry
        a /= a.sum();
        const double theta = rng.uniform(0.0, a.maxCoeff() - 1e-6);
        if (a.maxCoeff() > theta) REQUIRE(vtp::retention_count(a, theta) == 1);
    }
}

TEST_CASE("retention tie-break prefers the lower object index") {
    Vec a(4);
    a << .25, .25, .25, .25;
    const auto order = vtp::importance_order(a);
    CHECK(order == std::vector<int>{0, 1, 2, 3});
    const auto sched = vtp::build_schedule(a, {Vec::Constant(1, 0.5), 1, true});
    CHECK(sched.retained_ids[0] == std::vector<int>{0, 1});
}

TEST_CASE("build_schedule hand examples") {
    const Vec a = vec3(.5, .3, .2);

    vtp::PruningStrategy keep_all{Vec::Constant(4, 1.0), 1, true};
    auto sched = vtp::build_schedule(a, keep_all);
    for (int k = 0; k < 4; ++k) {
        CHECK(sched.retained_counts[static_cast<std::size_t>(k)] == 3);
        CHECK(sched.retained_ids[static_cast<std::size_t>(k)] == std::vector<int>{0, 1, 2});
    }

    vtp::PruningStrategy taper{vec3(1.0, 0.8, 0.4), 1, true};
    sched = vtp::build_schedule(a, taper);
    CHECK(sched.retained_counts == std::vector<int>{3, 2, 1});
    CHECK(sched.retained_ids[0] == std::vector<int>{0, 1, 2});
    CHECK(sched.retained_ids[1] == std::vector<int>{0, 1});
    CHECK(sched.retained_ids[2] == std::vector<int>{0});

    Vec two(2);
    two << 0.4, 0.8;
    vtp::PruningStrategy nonmono{two, 1, true};
    sched = vtp::build_schedule(a, nonmono);
    CHECK(sched.retained_counts == std::vector<int>{1, 1});
}

TEST_CASE("build_schedule without monotone clamp can regrow") {
    const Vec a = vec3(.5, .3, .2);
    Vec two(2);
    two << 0.4, 0.8;
    auto sched = vtp::build_schedule(a, {two, 1, false});
    CHECK(sched.retained_counts == std::vector<int>{1, 2});
}

TEST_CASE("build_schedule nesting holds for random strategies") {
    vtp::Rng rng(13);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = rng.uniform_int(1, 24);
        const int L = rng.uniform_int(1, 12);
        const Vec a = testkit::random_simplex(rng, n);
        Vec th(L);
        for (int k = 0; k < L; ++k) th[k] = rng.uniform(0.0, 1.0);
        const auto sched = vtp::build_schedule(a, {th, 1, true});
        for (int k = 1; k < L; ++k) {
            const auto& prev = sched.retained_ids[static_cast<std::size_t>(k - 1)];
            const auto& cur = sched.retained_ids[static_cast<std::size_t>(k)];
            REQUIRE(std::includes(prev.begin(), prev.end(), cur.begin(), cur.end()));
        }
    }
}

TEST_CASE("visual_flops trivial cases") {
    vtp::FlopsModel fm{4, 64.0, 128.0, 10, 12};
    const double full = vtp::visual_flops(fm);

    // Keeping everything ⇒ zero reduction.
    vtp::PruneSchedule all;
    all.retained_counts.assign(4, 10);
    all.retained_ids.assign(4, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    CHECK(vtp::reduction_ratio(fm, all) == Catch::Approx(0.0).margin(1e-15));

    // Zero visual tokens everywhere ⇒ full reduction.
    vtp::PruneSchedule none;
    none.retained_counts.assign(4, 0);
    none.retained_ids.assign(4, {});
    CHECK(vtp::visual_flops(fm, &none) == 0.0);
    CHECK(vtp::reduction_ratio(fm, none) == Catch::Approx(1.0));

    CHECK(full > 0.0);
}

TEST_CASE("visual_flops FFN summand is linear in d_ff") {
    vtp::FlopsModel fm{1, 32.0, 100.0, 4, 6};
    vtp::FlopsModel fm2 = fm;
    fm2.d_ff = 200.0;
    const double v = 12.0, tau = 6.0, d = 32.0;
    const double attn_part = 4.0 * ((v + tau) - tau) * d * d +
                             2.0 * ((v + tau) * (v + tau) - tau * tau) * d;
    const double ffn1 = vtp::visual_flops(fm) - attn_part;
    const double ffn2 = vtp::visual_flops(fm2) - attn_part;
    CHECK(ffn2 == Catch::Approx(2.0 * ffn1));
}

TEST_CASE("visual_flops strictly decreases when any retained count drops") {
    vtp::Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        vtp::FlopsModel fm{rng.uniform_int(1, 8), double(rng.uniform_int(8, 128)),
                           double(rng.uniform_int(8, 512)), rng.uniform_int(2, 32),
                           rng.uniform_int(0, 16)};
        std::vector<int> counts(static_cast<std::size_t>(fm.depth));
        for (auto& c : counts) c = rng.uniform_int(1, fm.n_objects);
        vtp::PruneSchedule s1;
        s1.retained_counts = counts;
        s1.retained_ids.assign(counts.size(), {});
        vtp::PruneSchedule s2 = s1;
        const std::size_t k = static_cast<std::size_t>(rng.uniform_int(0, fm.depth - 1));
        s2.retained_counts[k] -= 1;
        REQUIRE(vtp::visual_flops(fm, &s2) < vtp::visual_flops(fm, &s1));
    }
}

TEST_CASE("average_pruning_ratio reproduces the three reference configurations") {
    CHECK(vtp::average_pruning_ratio(16, 0.70, 32) == Catch::Approx(0.35).epsilon(0).margin(1e-9));
    CHECK(vtp::average_pruning_ratio(6, 0.80, 32) == Catch::Approx(0.65).epsilon(0).margin(1e-9));
    CHECK(vtp::average_pruning_ratio(2, 0.95, 32) ==
          Catch::Approx(0.890625).epsilon(0).margin(1e-12));
    CHECK(std::abs(vtp::average_pruning_ratio(2, 0.95, 32) - 0.90) < 0.01);
}

TEST_CASE("fixed_ratio_baseline keeps everything before the drop layer") {
    vtp::Rng rng(19);
    const Vec a = testkit::random_simplex(rng, 10);

    auto sched = vtp::fixed_ratio_baseline(a, 2, 0.95, 5);
    CHECK(sched.retained_counts == std::vector<int>{10, 10, 1, 1, 1});

    sched = vtp::fixed_ratio_baseline(a, 1, 0.0, 3);
    CHECK(sched.retained_counts == std::vector<int>{10, 10, 10});

    sched = vtp::fixed_ratio_baseline(a, 1, 1.0, 3);
    CHECK(sched.retained_counts == std::vector<int>{10, 1, 1});
}

TEST_CASE("fixed_ratio_baseline retains the top objects under the tie-break") {
    Vec a(5);
    a << .1, .4, .2, .2, .1;
    const auto sched = vtp::fixed_ratio_baseline(a, 1, 0.6, 2);
    // ceil(0.4*5)=2: top scores .4 (id 1) and the tied .2s resolve to id 2.
    CHECK(sched.retained_ids[1] == std::vector<int>{1, 2});
}

TEST_CASE("strategy JSON round trip and schedule CSV") {
    vtp::PruningStrategy s{vec3(1.0, 0.8, 0.4), 2, false};
    const auto back = vtp::pruning_strategy_from_json(vtp::to_json(s));
    CHECK((back.thresholds - s.thresholds).cwiseAbs().maxCoeff() == 0.0);
    CHECK(back.min_retain == 2);
    CHECK(back.monotone_depth == false);
    CHECK_THROWS_AS(vtp::pruning_strategy_from_json(nlohmann::json{{"min_retain", 1}}),
                    vtp::SchemaError);

    const Vec a = vec3(.5, .3, .2);
    const auto sched = vtp::build_schedule(a, {vec3(1.0, 0.8, 0.4), 1, true});
    const std::string csv = vtp::schedule_to_csv(sched);
    CHECK(csv == "layer,retained_count,retained_object_ids\n"
                 "0,3,0;1;2\n"
                 "1,2,0;1\n"
                 "2,1,0\n");
}
