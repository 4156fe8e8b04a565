// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vtp/attention.hpp"
#include "vtp/common.hpp"

namespace vtp {

// Cumulative-mass comparison slack. Simplex vectors are only guaranteed to sum
// to one within kSimplexTol, so theta = 1 must still retain every object.
inline constexpr double kRetentionSlack = 1e-9;

// Layer-wise cumulative thresholds. Layer indices are 0-based throughout.
struct PruningStrategy {
    Vec thresholds;
    int min_retain = 1;
    bool monotone_depth = true;

    int depth() const { return static_cast<int>(thresholds.size()); }

    void validate() const {
        require(thresholds.size() > 0, "pruning strategy: empty thresholds");
        require(min_retain >= 1, "pruning strategy: min_retain must be at least one");
        for (Eigen::Index k = 0; k < thresholds.size(); ++k) {
            require(thresholds[k] >= 0.0 && thresholds[k] <= 1.0,
                    "pruning strategy: thresholds must lie in [0,1]");
        }
    }
};

// Decoder-layer cost accounting (one multiply-accumulate = one FLOP):
// QKVO projections 4*N*d^2, attention score+mix 2*N^2*d, FFN 2*N*d*d_ff,
// with N = visual + text tokens.
struct FlopsModel {
    int depth = 0;
    double d_model = 0;
    double d_ff = 0;
    int n_objects = 0;
    int text_len = 0;

    void validate() const {
        require(depth >= 1 && d_model > 0 && d_ff > 0 && n_objects >= 1 && text_len >= 0,
                "flops model: all dimensions must be positive");
    }
};

// Per-layer retained object sets (ids ascending) plus their counts.
struct PruneSchedule {
    std::vector<int> retained_counts;
    std::vector<std::vector<int>> retained_ids;

    int depth() const { return static_cast<int>(retained_counts.size()); }
};

// Descending-score order; equal scores fall back to ascending object index.
inline std::vector<int> importance_order(const Vec& scores) {
    std::vector<int> order(static_cast<std::size_t>(scores.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    return order;
}

// Largest prefix of the descending order whose cumulative mass stays within
// theta, clamped to [min_retain, n].
inline int retention_count(const Vec& scores, double theta, int min_retain = 1) {
    require(scores.size() > 0, "retention_count: empty importance vector");
    require(theta >= 0.0 && theta <= 1.0, "retention_count: theta must lie in [0,1]");
    require(min_retain >= 1, "retention_count: min_retain must be at least one");
    const std::vector<int> order = importance_order(scores);
    const int n = static_cast<int>(scores.size());
    int r = 0;
    double cum = 0.0;
    for (int j = 0; j < n; ++j) {
        cum += scores[order[static_cast<std::size_t>(j)]];
        if (cum <= theta + kRetentionSlack) {
            r = j + 1;
        } else {
            break;
        }
    }
    return std::clamp(r, std::min(min_retain, n), n);
}

inline int retention_count(const ImportanceMap& map, double theta, int min_retain = 1) {
    return retention_count(map.scores, theta, min_retain);
}

namespace detail {

inline PruneSchedule schedule_from_counts(const Vec& scores, const std::vector<int>& counts) {
    const std::vector<int> order = importance_order(scores);
    PruneSchedule sched;
    sched.retained_counts = counts;
    sched.retained_ids.reserve(counts.size());
    for (int r : counts) {
        std::vector<int> ids(order.begin(), order.begin() + r);
        std::sort(ids.begin(), ids.end());
        sched.retained_ids.push_back(std::move(ids));
    }
    return sched;
}

}  // namespace detail

// Per-layer retention: r_k from the cumulative threshold, optionally clamped
// so retained sets never regrow with depth. Retained objects keep their whole
// token triplet; the schedule therefore stores object ids.
inline PruneSchedule build_schedule(const Vec& scores, const PruningStrategy& strategy) {
    strategy.validate();
    const int L = strategy.depth();
    std::vector<int> counts(static_cast<std::size_t>(L));
    for (int k = 0; k < L; ++k) {
        int r = retention_count(scores, strategy.thresholds[k], strategy.min_retain);
        if (strategy.monotone_depth && k > 0) {
            r = std::min(r, counts[static_cast<std::size_t>(k - 1)]);
        }
        counts[static_cast<std::size_t>(k)] = r;
    }
    return detail::schedule_from_counts(scores, counts);
}

inline PruneSchedule build_schedule(const ImportanceMap& map, const PruningStrategy& strategy) {
    return build_schedule(map.scores, strategy);
}

// Visual-attributable FLOPs of one layer holding v visual and tau text tokens:
// the layer cost minus the cost with zero visual tokens.
inline double layer_visual_flops(const FlopsModel& fm, int v_tokens) {
    const double tau = static_cast<double>(fm.text_len);
    const double v = static_cast<double>(v_tokens);
    auto layer_cost = [&](double N) {
        return 4.0 * N * fm.d_model * fm.d_model + 2.0 * N * N * fm.d_model +
               2.0 * N * fm.d_model * fm.d_ff;
    };
    return layer_cost(v + tau) - layer_cost(tau);
}

// Total visual-attributable FLOPs across depth. A null schedule means the
// unpruned model (all 3n visual tokens at every layer).
inline double visual_flops(const FlopsModel& fm, const PruneSchedule* schedule = nullptr) {
    fm.validate();
    double total = 0.0;
    for (int k = 0; k < fm.depth; ++k) {
        int r = fm.n_objects;
        if (schedule != nullptr) {
            require(schedule->depth() == fm.depth, "visual_flops: schedule depth mismatch");
            r = schedule->retained_counts[static_cast<std::size_t>(k)];
            require(r >= 0 && r <= fm.n_objects, "visual_flops: retained count out of range");
        }
        total += layer_visual_flops(fm, 3 * r);
    }
    return total;
}

inline double reduction_ratio(const FlopsModel& fm, const PruneSchedule& schedule) {
    const double full = visual_flops(fm, nullptr);
    const double pruned = visual_flops(fm, &schedule);
    return 1.0 - pruned / full;
}

// Token-count-averaged pruning ratio of a fixed-ratio profile that prunes a
// fraction p from layer k onward (0-based k = number of unpruned layers).
inline double average_pruning_ratio(int drop_layer, double ratio, int depth) {
    require(depth >= 1, "average_pruning_ratio: depth must be positive");
    require(drop_layer >= 1 && drop_layer <= depth,
            "average_pruning_ratio: drop layer out of range");
    require(ratio >= 0.0 && ratio <= 1.0, "average_pruning_ratio: ratio must lie in [0,1]");
    return ratio * static_cast<double>(depth - drop_layer) / static_cast<double>(depth);
}

// Static comparator: keep everything before layer k, then a fixed ceil((1-p)n)
// objects (floored at min_retain) from layer k onward.
inline PruneSchedule fixed_ratio_baseline(const Vec& scores, int drop_layer, double ratio,
                                          int depth, int min_retain = 1) {
    require(scores.size() > 0, "fixed_ratio_baseline: empty importance vector");
    require(depth >= 1, "fixed_ratio_baseline: depth must be positive");
    require(drop_layer >= 1 && drop_layer <= depth, "fixed_ratio_baseline: drop layer out of range");
    require(ratio >= 0.0 && ratio <= 1.0, "fixed_ratio_baseline: ratio must lie in [0,1]");
    require(min_retain >= 1, "fixed_ratio_baseline: min_retain must be at least one");
    const int n = static_cast<int>(scores.size());
    const int kept = std::clamp(
        static_cast<int>(std::ceil((1.0 - ratio) * static_cast<double>(n))), std::min(min_retain, n), n);
    std::vector<int> counts(static_cast<std::size_t>(depth), n);
    for (int k = drop_layer; k < depth; ++k) counts[static_cast<std::size_t>(k)] = kept;
    return detail::schedule_from_counts(scores, counts);
}

inline PruneSchedule fixed_ratio_baseline(const ImportanceMap& map, int drop_layer, double ratio,
                                          int depth, int min_retain = 1) {
    return fixed_ratio_baseline(map.scores, drop_layer, ratio, depth, min_retain);
}

// --- Serialization -----------------------------------------------------------

inline nlohmann::json to_json(const PruningStrategy& s) {
    return nlohmann::json{
        {"thresholds",
         std::vector<double>(s.thresholds.data(), s.thresholds.data() + s.thresholds.size())},
        {"min_retain", s.min_retain},
        {"monotone_depth", s.monotone_depth}};
}

inline PruningStrategy pruning_strategy_from_json(const nlohmann::json& j) {
    PruningStrategy s;
    try {
        const auto th = j.at("thresholds").get<std::vector<double>>();
        s.thresholds = Eigen::Map<const Vec>(th.data(), static_cast<Eigen::Index>(th.size()));
        s.min_retain = j.at("min_retain").get<int>();
        s.monotone_depth = j.at("monotone_depth").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("pruning strategy: malformed JSON: ") + e.what());
    }
    s.validate();
    return s;
}

// CSV rows: layer, retained_count, retained object ids joined by ';'.
inline std::string schedule_to_csv(const PruneSchedule& sched) {
    std::string out = "layer,retained_count,retained_object_ids\n";
    for (int k = 0; k < sched.depth(); ++k) {
        out += std::to_string(k);
        out += ',';
        out += std::to_string(sched.retained_counts[static_cast<std::size_t>(k)]);
        out += ',';
        const auto& ids = sched.retained_ids[static_cast<std::size_t>(k)];
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i > 0) out += ';';
            out += std::to_string(ids[i]);
        }
        out += '\n';
    }
    return out;
}

}  // namespace vtp
