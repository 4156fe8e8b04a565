// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "vtp/attention.hpp"
#include "vtp/common.hpp"
#include "vtp/rng.hpp"

namespace testkit {

// Strictly lower-triangular-supported matrix with rows renormalized to one.
inline vtp::Mat random_causal_row_stochastic(vtp::Rng& rng, int T) {
    vtp::Mat A = vtp::Mat::Zero(T, T);
    for (int i = 0; i < T; ++i) {
        double sum = 0.0;
        for (int j = 0; j <= i; ++j) {
            A(i, j) = rng.uniform(0.01, 1.0);
            sum += A(i, j);
        }
        for (int j = 0; j <= i; ++j) A(i, j) /= sum;
    }
    return A;
}

inline vtp::AttentionStack random_stack(vtp::Rng& rng, int layers, int heads, int n_objects,
                                        int prompt_len, int gen_len) {
    vtp::AttentionStack stack;
    stack.layers = layers;
    stack.heads = heads;
    stack.seg = {n_objects, prompt_len, gen_len};
    const int T = stack.seg.total();
    for (int k = 0; k < layers * heads; ++k) {
        stack.matrices.push_back(random_causal_row_stochastic(rng, T));
    }
    stack.step_confidences = vtp::Vec(gen_len);
    for (int i = 0; i < gen_len; ++i) stack.step_confidences[i] = rng.uniform(0.1, 1.0);
    return stack;
}

inline vtp::Vec random_simplex(vtp::Rng& rng, int n) {
    vtp::Vec v(n);
    for (int i = 0; i < n; ++i) v[i] = rng.uniform(1e-4, 1.0);
    return v / v.sum();
}

}  // namespace testkit
