// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vtp/common.hpp"
#include "vtp/pruning.hpp"

namespace vtp {

struct SearchConfig {
    double epsilon = 1e-4;
    double alpha_min = 0.0;
    double alpha_max = 2.0;
    // Either an absolute visual-FLOPs budget or, when budget_is_fraction, a
    // fraction of the unpruned batch cost (resolved inside search()).
    double budget = 1.0;
    bool budget_is_fraction = true;
    int max_iters = 64;
    // Strategy family shared by every probed alpha.
    int min_retain = 1;
    bool monotone_depth = true;

    void validate() const {
        require(epsilon > 0.0, "search config: epsilon must be positive");
        require(alpha_min < alpha_max, "search config: alpha_min must be below alpha_max");
        require(budget > 0.0, "search config: budget must be positive");
        require(max_iters >= 1, "search config: max_iters must be positive");
        require(min_retain >= 1, "search config: min_retain must be at least one");
    }
};

struct BaselineThresholds {
    Vec thetas;

    int depth() const { return static_cast<int>(thetas.size()); }

    void validate() const {
        require(thetas.size() > 0, "baseline thresholds: empty");
        for (Eigen::Index k = 0; k < thetas.size(); ++k) {
            require(thetas[k] >= 0.0 && thetas[k] <= 1.0,
                    "baseline thresholds: values must lie in [0,1]");
        }
    }
};

struct SearchResult {
    double alpha_star = 0.0;
    PruningStrategy strategy;
    double achieved_flops = 0.0;
    int iterations = 0;
    bool feasible = false;
};

struct SearchTraceRow {
    int iteration = 0;
    double alpha_low = 0.0;
    double alpha_high = 0.0;
    double cost_mid = 0.0;
};

// One validation sample as the cost function sees it: predicted importance
// plus the dimensions of the model it would run through.
struct CostSample {
    Vec scores;
    FlopsModel flops;
};

// theta0_k = max over the batch of the cumulative mass of the top r0_k
// predicted scores (r0_k clipped to each sample's object count).
inline BaselineThresholds init_baseline_from_static(const std::vector<int>& static_counts,
                                                    const std::vector<Vec>& batch) {
    if (batch.empty()) throw std::invalid_argument("empty batch: no samples for baseline init");
    BaselineThresholds out;
    out.thetas = Vec::Zero(static_cast<Eigen::Index>(static_counts.size()));
    for (std::size_t k = 0; k < static_counts.size(); ++k) {
        require(static_counts[k] >= 1, "baseline init: counts must be at least one");
        double best = 0.0;
        for (const Vec& scores : batch) {
            const int n = static_cast<int>(scores.size());
            const int r = std::min(static_counts[k], n);
            const std::vector<int> order = importance_order(scores);
            double cum = 0.0;
            for (int i = 0; i < r; ++i) cum += scores[order[static_cast<std::size_t>(i)]];
            best = std::max(best, cum);
        }
        out.thetas[static_cast<Eigen::Index>(k)] = std::min(best, 1.0);
    }
    return out;
}

// The strategy family P(alpha): per-threshold product clamped into [0,1].
inline PruningStrategy scale_strategy(const BaselineThresholds& p0, double alpha, int min_retain,
                                      bool monotone_depth) {
    PruningStrategy s;
    s.thresholds = (p0.thetas * alpha).cwiseMax(0.0).cwiseMin(1.0);
    s.min_retain = min_retain;
    s.monotone_depth = monotone_depth;
    return s;
}

inline double batch_cost(const std::vector<CostSample>& batch, const PruningStrategy& strategy) {
    double total = 0.0;
    for (const CostSample& s : batch) {
        const PruneSchedule sched = build_schedule(s.scores, strategy);
        total += visual_flops(s.flops, &sched);
    }
    return total;
}

inline double unpruned_batch_cost(const std::vector<CostSample>& batch) {
    double total = 0.0;
    for (const CostSample& s : batch) total += visual_flops(s.flops, nullptr);
    return total;
}

// Core bisection over a monotone non-decreasing cost(alpha). Returns the
// final lower bound: the maximal feasible alpha up to epsilon resolution.
// Infeasible budgets (cost(alpha_min) > budget) are reported via the flag.
inline SearchResult bisect_max_feasible(const std::function<double(double)>& cost,
                                        const SearchConfig& cfg, double absolute_budget,
                                        std::vector<SearchTraceRow>* trace = nullptr) {
    cfg.validate();
    SearchResult res;
    const double floor_cost = cost(cfg.alpha_min);
    if (floor_cost > absolute_budget) {
        res.alpha_star = cfg.alpha_min;
        res.achieved_flops = floor_cost;
        res.feasible = false;
        res.iterations = 0;
        return res;
    }
    double lo = cfg.alpha_min;
    double hi = cfg.alpha_max;
    int iters = 0;
    while (hi - lo > cfg.epsilon && iters < cfg.max_iters) {
        const double mid = 0.5 * (lo + hi);
        const double c = cost(mid);
        if (trace != nullptr) trace->push_back({iters, lo, hi, c});
        if (c <= absolute_budget) {
            lo = mid;
        } else {
            hi = mid;
        }
        ++iters;
    }
    res.alpha_star = lo;
    res.achieved_flops = cost(lo);
    res.iterations = iters;
    res.feasible = res.achieved_flops <= absolute_budget;
    return res;
}

// Algorithm entry point: bisection on the scaled-threshold family over a
// validation batch against a FLOPs budget.
inline SearchResult search(const std::vector<CostSample>& batch, const BaselineThresholds& p0,
                           const SearchConfig& cfg, std::vector<SearchTraceRow>* trace = nullptr) {
    if (batch.empty()) throw std::invalid_argument("empty batch: nothing to search over");
    p0.validate();
    cfg.validate();
    const double budget =
        cfg.budget_is_fraction ? cfg.budget * unpruned_batch_cost(batch) : cfg.budget;
    auto cost = [&](double alpha) {
        return batch_cost(batch, scale_strategy(p0, alpha, cfg.min_retain, cfg.monotone_depth));
    };
    SearchResult res = bisect_max_feasible(cost, cfg, budget, trace);
    res.strategy = scale_strategy(p0, res.alpha_star, cfg.min_retain, cfg.monotone_depth);
    return res;
}

// --- Serialization -----------------------------------------------------------

inline nlohmann::json to_json(const SearchResult& r) {
    return nlohmann::json{{"alpha_star", r.alpha_star},
                          {"strategy", to_json(r.strategy)},
                          {"achieved_flops", r.achieved_flops},
                          {"iterations", r.iterations},
                          {"feasible", r.feasible}};
}

inline SearchResult search_result_from_json(const nlohmann::json& j) {
    SearchResult r;
    try {
        r.alpha_star = j.at("alpha_star").get<double>();
        r.strategy = pruning_strategy_from_json(j.at("strategy"));
        r.achieved_flops = j.at("achieved_flops").get<double>();
        r.iterations = j.at("iterations").get<int>();
        r.feasible = j.at("feasible").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("search result: malformed JSON: ") + e.what());
    }
    return r;
}

inline std::string search_trace_to_csv(const std::vector<SearchTraceRow>& rows) {
    std::string out = "iteration,alpha_low,alpha_high,cost_mid\n";
    char buf[160];
    for (const SearchTraceRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", r.iteration, r.alpha_low,
                      r.alpha_high, r.cost_mid);
        out += buf;
    }
    return out;
}

}  // namespace vtp
