// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vtp/common.hpp"

namespace vtp {

// Token layout of one decoding step: 3n visual tokens (three per object:
// identifier, 3D semantic, 2D semantic), then m prompt tokens, then t
// generated tokens. Column/row indices below follow this order, 0-based.
struct TokenSegmentation {
    int n_objects = 0;
    int prompt_len = 0;
    int gen_len = 0;

    int visual_len() const { return 3 * n_objects; }
    int total() const { return visual_len() + prompt_len + gen_len; }
    int object_of(int visual_col) const { return visual_col / 3; }
};

// Stack of per-(layer, head) attention matrices plus per-step generation
// confidences. Matrices are causal and row-stochastic over the unmasked
// prefix; matrix (l, h) lives at index l * heads + h.
struct AttentionStack {
    int layers = 0;
    int heads = 0;
    TokenSegmentation seg;
    std::vector<Mat> matrices;
    Vec step_confidences;

    const Mat& matrix(int layer, int head) const {
        return matrices[static_cast<std::size_t>(layer * heads + head)];
    }

    void validate() const {
        const int T = seg.total();
        require(seg.n_objects >= 1, "attention stack: need at least one object");
        require(seg.prompt_len >= 0 && seg.gen_len >= 0, "attention stack: negative segment");
        require(matrices.size() == static_cast<std::size_t>(layers) * static_cast<std::size_t>(heads),
                "attention stack: matrix count does not match layers*heads");
        require(step_confidences.size() == seg.gen_len,
                "attention stack: one confidence per generated step required");
        for (Eigen::Index i = 0; i < step_confidences.size(); ++i) {
            require(step_confidences[i] > 0.0 && step_confidences[i] <= 1.0,
                    "attention stack: confidences must lie in (0, 1]");
        }
        for (const Mat& A : matrices) {
            require(A.rows() == T && A.cols() == T, "attention stack: matrix shape mismatch");
            for (int i = 0; i < T; ++i) {
                double row_sum = 0.0;
                for (int j = 0; j < T; ++j) {
                    const double a = A(i, j);
                    if (j > i) {
                        require(a == 0.0, "attention stack: nonzero entry above the causal diagonal");
                    } else {
                        require(a >= -1e-12, "attention stack: negative attention weight");
                        row_sum += a;
                    }
                }
                require(std::abs(row_sum - 1.0) <= kSimplexTol,
                        "attention stack: row does not sum to one over its prefix");
            }
        }
    }
};

// Per-object importance on the probability simplex.
struct ImportanceMap {
    Vec scores;

    int size() const { return static_cast<int>(scores.size()); }

    void validate() const {
        require(is_simplex(scores), "importance map: scores must form a simplex");
    }
};

// The three per-visual-token aggregates before pooling, kept for audits.
struct ComponentScores {
    Vec self;    // length 3n
    Vec prompt;  // length 3n
    Vec text;    // length 3n
};

// Uniform mean over all (layer, head) matrices. Accumulation order is fixed
// (layer-major, then head) so results are reproducible.
inline Mat aggregate_mean(const AttentionStack& stack) {
    const std::size_t count = stack.matrices.size();
    require(count > 0, "empty stack: no attention matrices to aggregate");
    Mat acc = Mat::Zero(stack.matrices[0].rows(), stack.matrices[0].cols());
    for (const Mat& A : stack.matrices) {
        require(A.rows() == acc.rows() && A.cols() == acc.cols(),
                "aggregate_mean: inconsistent matrix shapes");
        acc += A;
    }
    return acc / static_cast<double>(count);
}

// Column-wise causal average over the visual self block: column j is averaged
// over the rows that can attend to it (rows j .. v-1), i.e. divided by the
// count v - j. v is the visual token count (3n for object triplets).
inline Vec self_importance(const Mat& A_mean, int visual_len) {
    const int v = visual_len;
    require(v >= 1, "self_importance: need at least one visual token");
    require(A_mean.rows() >= v && A_mean.cols() >= v,
            "self_importance: matrix smaller than the visual block");
    Vec out(v);
    for (int j = 0; j < v; ++j) {
        double s = 0.0;
        for (int i = j; i < v; ++i) s += A_mean(i, j);
        out[j] = s / static_cast<double>(v - j);
    }
    return out;
}

// Plain column mean over the prompt rows (an m x 3n block).
inline Vec prompt_importance(const Mat& prompt_block) {
    require(prompt_block.rows() > 0, "empty prompt: no prompt rows to average");
    require(prompt_block.cols() > 0, "prompt_importance: empty columns");
    return prompt_block.colwise().mean().transpose();
}

// Confidence-weighted column average over the generated rows (t x 3n block);
// weights are the per-step confidences.
inline Vec text_importance(const Mat& text_block, const Vec& confidences) {
    require(text_block.rows() > 0, "empty generation: no generated rows to average");
    require(text_block.cols() > 0, "text_importance: empty columns");
    require(confidences.size() == text_block.rows(),
            "text_importance: one confidence per generated row required");
    const double total = confidences.sum();
    require(total > 0.0, "zero confidence: confidence weights sum to zero");
    Vec out = Vec::Zero(text_block.cols());
    for (Eigen::Index i = 0; i < text_block.rows(); ++i) {
        out += confidences[i] * text_block.row(i).transpose();
    }
    return out / total;
}

inline ComponentScores aggregate_components(const AttentionStack& stack) {
    const Mat mean = aggregate_mean(stack);
    const int v = stack.seg.visual_len();
    const int m = stack.seg.prompt_len;
    const int t = stack.seg.gen_len;
    ComponentScores c;
    c.self = self_importance(mean, v);
    require(m > 0, "empty prompt: stack carries no prompt rows");
    require(t > 0, "empty generation: stack carries no generated rows");
    c.prompt = prompt_importance(mean.block(v, 0, m, v));
    c.text = text_importance(mean.block(v + m, 0, t, v), stack.step_confidences);
    return c;
}

// Mean-pool per-token scores over each object's three tokens, then normalize
// onto the simplex.
inline ImportanceMap pool_and_normalize(const Vec& per_token) {
    require(per_token.size() > 0 && per_token.size() % 3 == 0,
            "pool_and_normalize: length must be a positive multiple of three");
    const int n = static_cast<int>(per_token.size()) / 3;
    Vec pooled(n);
    for (int o = 0; o < n; ++o) {
        pooled[o] = (per_token[3 * o] + per_token[3 * o + 1] + per_token[3 * o + 2]) / 3.0;
    }
    const double total = pooled.sum();
    if (total <= 0.0) {
        throw std::invalid_argument("degenerate attention: pooled importance mass is zero");
    }
    return ImportanceMap{pooled / total};
}

// Oracle importance: sum of the three components per visual token, pooled per
// object, normalized.
inline ImportanceMap build_oracle(const AttentionStack& stack) {
    const ComponentScores c = aggregate_components(stack);
    return pool_and_normalize(c.self + c.prompt + c.text);
}

// Temperature sharpening on the simplex: p_i^(1/T) / sum_j p_j^(1/T).
// T in (0, 1) concentrates mass, T = 1 is the identity.
inline ImportanceMap sharpen(const ImportanceMap& map, double temperature) {
    require(temperature > 0.0, "sharpen: temperature must be positive");
    map.validate();
    const double inv_t = 1.0 / temperature;
    Vec powed = map.scores.array().max(0.0).pow(inv_t);
    const double total = powed.sum();
    require(total > 0.0, "sharpen: all mass vanished");
    return ImportanceMap{powed / total};
}

// --- JSON serialization ------------------------------------------------------

inline nlohmann::json to_json(const AttentionStack& stack) {
    nlohmann::json j;
    j["L"] = stack.layers;
    j["H"] = stack.heads;
    j["n"] = stack.seg.n_objects;
    j["m"] = stack.seg.prompt_len;
    j["t"] = stack.seg.gen_len;
    j["order"] = "row-major";
    j["confidences"] = std::vector<double>(
        stack.step_confidences.data(), stack.step_confidences.data() + stack.step_confidences.size());
    nlohmann::json mats = nlohmann::json::array();
    for (const Mat& A : stack.matrices) {
        mats.push_back(std::vector<double>(A.data(), A.data() + A.size()));
    }
    j["matrices"] = std::move(mats);
    return j;
}

inline AttentionStack attention_stack_from_json(const nlohmann::json& j) {
    AttentionStack stack;
    try {
        stack.layers = j.at("L").get<int>();
        stack.heads = j.at("H").get<int>();
        stack.seg.n_objects = j.at("n").get<int>();
        stack.seg.prompt_len = j.at("m").get<int>();
        stack.seg.gen_len = j.at("t").get<int>();
        if (j.at("order").get<std::string>() != "row-major") {
            throw SchemaError("attention stack: unknown matrix order");
        }
        const auto conf = j.at("confidences").get<std::vector<double>>();
        stack.step_confidences = Eigen::Map<const Vec>(conf.data(), static_cast<Eigen::Index>(conf.size()));
        const int T = stack.seg.total();
        for (const auto& flat : j.at("matrices")) {
            const auto vals = flat.get<std::vector<double>>();
            if (vals.size() != static_cast<std::size_t>(T) * static_cast<std::size_t>(T)) {
                throw SchemaError("attention stack: flattened matrix has wrong element count");
            }
            stack.matrices.push_back(Eigen::Map<const Mat>(vals.data(), T, T));
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("attention stack: malformed JSON: ") + e.what());
    }
    stack.validate();
    return stack;
}

inline nlohmann::json to_json(const ImportanceMap& map) {
    return nlohmann::json{
        {"scores", std::vector<double>(map.scores.data(), map.scores.data() + map.scores.size())}};
}

inline ImportanceMap importance_map_from_json(const nlohmann::json& j) {
    std::vector<double> scores;
    try {
        scores = j.at("scores").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("importance map: malformed JSON: ") + e.what());
    }
    ImportanceMap map{Eigen::Map<const Vec>(scores.data(), static_cast<Eigen::Index>(scores.size()))};
    map.validate();
    return map;
}

}  // namespace vtp
