// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "vtp/common.hpp"

namespace vtp {

// Fractional ranks (1-based), ties receive the average of their rank span.
inline Vec average_ranks(const Vec& v) {
    const Eigen::Index n = v.size();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](Eigen::Index a, Eigen::Index b) { return v[a] < v[b]; });
    Vec ranks(n);
    Eigen::Index i = 0;
    while (i < n) {
        Eigen::Index j = i;
        while (j + 1 < n && v[order[static_cast<std::size_t>(j + 1)]] ==
                                v[order[static_cast<std::size_t>(i)]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (Eigen::Index k = i; k <= j; ++k) {
            ranks[order[static_cast<std::size_t>(k)]] = avg;
        }
        i = j + 1;
    }
    return ranks;
}

inline double pearson(const Vec& x, const Vec& y) {
    require(x.size() == y.size() && x.size() >= 2, "pearson: need two equal-length vectors");
    const double mx = x.mean();
    const double my = y.mean();
    const Vec dx = x.array() - mx;
    const Vec dy = y.array() - my;
    const double denom = std::sqrt(dx.squaredNorm() * dy.squaredNorm());
    if (denom == 0.0) return 0.0;
    return dx.dot(dy) / denom;
}

inline double spearman(const Vec& x, const Vec& y) {
    return pearson(average_ranks(x), average_ranks(y));
}

}  // namespace vtp
