// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "vtp/attention.hpp"
#include "vtp/common.hpp"
#include "vtp/pruning.hpp"
#include "vtp/rng.hpp"

namespace vtp {

// --- Vocabulary --------------------------------------------------------------
// Closed synthetic vocabulary (< 256 ids) shared by prompts and generated
// tokens so the predictor's text encoder needs no external tokenizer.
inline constexpr int kVocabSize = 256;
inline constexpr int kTokNearest = 1;
inline constexpr int kTokLargest = 2;
inline constexpr int kTokSmallest = 3;
inline constexpr int kTokAttribute = 4;
inline constexpr int kHueCount = 16;
inline constexpr int kHueTokenBase = 8;  // ids 8..23
inline constexpr int kRefPointCount = 8;
inline constexpr int kRefTokenBase = 32;  // ids 32..39
inline constexpr int kGenTokenBase = 128;
inline constexpr int kGenTokenCount = 64;  // ids 128..191

// Fixed spatial probe points. Proximity to each is an observable object
// feature, so every spatial query resolves from features the predictor sees.
inline Eigen::Vector3d ref_point(int r) {
    require(r >= 0 && r < kRefPointCount, "ref_point: index out of range");
    static const double pts[kRefPointCount][3] = {
        {0, 0, 0},   {3, 3, 3},   {3, 3, -3},  {3, -3, 3},
        {3, -3, -3}, {-3, 3, 3},  {-3, 3, -3}, {-3, -3, 3},
    };
    return Eigen::Vector3d(pts[r][0], pts[r][1], pts[r][2]);
}

// --- Domain types ------------------------------------------------------------

struct SceneDims {
    int d = 64;    // identifier embedding width
    int d_p = 48;  // 3D semantic embedding width
    int d_v = 32;  // 2D semantic embedding width

    void validate() const {
        require(d >= 1, "scene dims: d must be positive");
        // The leading slots of the semantic embeddings carry the hue one-hot,
        // probe proximities and log-volume; the rest is filler noise.
        require(d_p >= kHueCount + kRefPointCount + 1,
                "scene dims: d_p too small for the feature layout");
        require(d_v >= kHueCount, "scene dims: d_v too small for the hue one-hot");
    }
};

enum class QueryKind : int {
    kAttributeNearest = 0,  // nearest object of a given hue to the origin
    kNearestToPoint = 1,    // nearest object to one fixed probe point
    kLargest = 2,
    kSmallest = 3,
};

struct SceneSample {
    int n = 0;
    SceneDims dims;
    Mat eo;       // n x d   identifier embeddings (global per-slot codebook)
    Mat ep;       // n x d_p 3D semantic embeddings
    Mat ev;       // n x d_v 2D semantic embeddings
    Mat centers;  // n x 3
    Mat sizes;    // n x 3, componentwise positive
    std::vector<int> hues;
    std::vector<int> prompt_tokens;
    std::vector<int> gen_tokens;
    std::vector<int> target_object_ids;  // 0-based, ascending
    QueryKind query_kind = QueryKind::kAttributeNearest;
    int query_hue = -1;  // meaningful for kAttributeNearest
    int query_ref = -1;  // meaningful for kAttributeNearest / kNearestToPoint

    void validate() const {
        require(n >= 1, "scene sample: n must be positive");
        dims.validate();
        require(eo.rows() == n && eo.cols() == dims.d, "scene sample: eo shape mismatch");
        require(ep.rows() == n && ep.cols() == dims.d_p, "scene sample: ep shape mismatch");
        require(ev.rows() == n && ev.cols() == dims.d_v, "scene sample: ev shape mismatch");
        require(centers.rows() == n && centers.cols() == 3, "scene sample: centers shape mismatch");
        require(sizes.rows() == n && sizes.cols() == 3, "scene sample: sizes shape mismatch");
        require((sizes.array() > 0.0).all(), "scene sample: box sizes must be positive");
        require(static_cast<int>(hues.size()) == n, "scene sample: hue count mismatch");
        for (int h : hues) require(h >= 0 && h < kHueCount, "scene sample: hue out of range");
        require(!prompt_tokens.empty(), "scene sample: empty prompt");
        require(!gen_tokens.empty(), "scene sample: empty generation");
        for (int tok : prompt_tokens)
            require(tok >= 0 && tok < kVocabSize, "scene sample: prompt token out of range");
        for (int tok : gen_tokens)
            require(tok >= 0 && tok < kVocabSize, "scene sample: generated token out of range");
        require(!target_object_ids.empty(), "scene sample: no target object");
        for (int id : target_object_ids)
            require(id >= 0 && id < n, "scene sample: target id out of range");
    }

    TokenSegmentation segmentation() const {
        return TokenSegmentation{n, static_cast<int>(prompt_tokens.size()),
                                 static_cast<int>(gen_tokens.size())};
    }
};

struct PlantedRelevance {
    Vec relevance;  // simplex over the sample's objects
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        require(is_simplex(relevance, kSimplexTol), "planted relevance: not a simplex");
        require(noise_sigma >= 0.0, "planted relevance: sigma must be non-negative");
    }
};

// --- Generation --------------------------------------------------------------

// Identifier codebook row for an object slot. Fixed across scenes (it names
// the slot, not the scene), so it is derived from a global constant seed.
inline Vec identifier_embedding(int slot, int d) {
    require(slot >= 0, "identifier_embedding: negative slot");
    require(d >= 1, "identifier_embedding: d must be positive");
    constexpr std::uint64_t kCodebookSeed = 0x51C0DEB00Full;
    Rng rng(mix_seed(kCodebookSeed, static_cast<std::uint64_t>(slot)));
    Vec row(d);
    for (int k = 0; k < d; ++k) row[k] = rng.normal(0.0, 1.0);
    return row;
}

inline SceneSample generate_scene(int n, const SceneDims& dims, std::uint64_t seed) {
    require(n >= 1, "generate_scene: n must be positive");
    dims.validate();
    Rng rng(mix_seed(seed, 0xA11CE));

    SceneSample s;
    s.n = n;
    s.dims = dims;
    s.eo = Mat(n, dims.d);
    s.ep = Mat::Zero(n, dims.d_p);
    s.ev = Mat::Zero(n, dims.d_v);
    s.centers = Mat(n, 3);
    s.sizes = Mat(n, 3);
    s.hues.resize(static_cast<std::size_t>(n));

    for (int i = 0; i < n; ++i) {
        s.hues[static_cast<std::size_t>(i)] = rng.uniform_int(0, kHueCount - 1);
        for (int k = 0; k < 3; ++k) {
            s.centers(i, k) = rng.uniform(-4.0, 4.0);
            s.sizes(i, k) = rng.uniform(0.2, 1.5);
        }
    }

    // Semantic embeddings: informative features in fixed leading slots, pure
    // noise in the remaining filler dimensions.
    for (int i = 0; i < n; ++i) {
        const int hue = s.hues[static_cast<std::size_t>(i)];
        s.ep(i, hue) = 1.0;
        for (int r = 0; r < kRefPointCount; ++r) {
            const double dist = (s.centers.row(i).transpose() - ref_point(r)).norm();
            s.ep(i, kHueCount + r) = std::exp(-dist / 3.0);
        }
        const double vol = s.sizes(i, 0) * s.sizes(i, 1) * s.sizes(i, 2);
        s.ep(i, kHueCount + kRefPointCount) = std::log(vol);
        for (int k = kHueCount + kRefPointCount + 1; k < dims.d_p; ++k)
            s.ep(i, k) = rng.normal(0.0, 0.25);
        s.ev(i, hue) = 1.0;
        for (int k = kHueCount; k < dims.d_v; ++k) s.ev(i, k) = rng.normal(0.0, 0.25);
    }

    for (int i = 0; i < n; ++i) s.eo.row(i) = identifier_embedding(i, dims.d).transpose();

    // Query family, its parameters, and the analytically derived target.
    const double pick = rng.uniform(0.0, 1.0);
    auto dist_to = [&](int i, const Eigen::Vector3d& p) {
        return (s.centers.row(i).transpose() - p).norm();
    };
    if (pick < 0.40) {
        s.query_kind = QueryKind::kAttributeNearest;
        s.query_hue = s.hues[static_cast<std::size_t>(rng.uniform_int(0, n - 1))];
        s.query_ref = 0;
        int best = -1;
        double best_d = 0.0;
        for (int i = 0; i < n; ++i) {
            if (s.hues[static_cast<std::size_t>(i)] != s.query_hue) continue;
            const double di = dist_to(i, ref_point(0));
            if (best < 0 || di < best_d) {
                best = i;
                best_d = di;
            }
        }
        s.target_object_ids = {best};
        s.prompt_tokens = {kTokAttribute, kHueTokenBase + s.query_hue, kRefTokenBase};
    } else if (pick < 0.70) {
        s.query_kind = QueryKind::kNearestToPoint;
        s.query_ref = rng.uniform_int(0, kRefPointCount - 1);
        int best = 0;
        double best_d = dist_to(0, ref_point(s.query_ref));
        for (int i = 1; i < n; ++i) {
            const double di = dist_to(i, ref_point(s.query_ref));
            if (di < best_d) {
                best = i;
                best_d = di;
            }
        }
        s.target_object_ids = {best};
        s.prompt_tokens = {kTokNearest, kRefTokenBase + s.query_ref};
    } else {
        const bool largest = pick < 0.85;
        s.query_kind = largest ? QueryKind::kLargest : QueryKind::kSmallest;
        int best = 0;
        double best_v = s.sizes(0, 0) * s.sizes(0, 1) * s.sizes(0, 2);
        for (int i = 1; i < n; ++i) {
            const double vi = s.sizes(i, 0) * s.sizes(i, 1) * s.sizes(i, 2);
            if (largest ? (vi > best_v) : (vi < best_v)) {
                best = i;
                best_v = vi;
            }
        }
        s.target_object_ids = {best};
        s.prompt_tokens = {largest ? kTokLargest : kTokSmallest};
    }

    const int t = rng.uniform_int(1, 8);
    s.gen_tokens.resize(static_cast<std::size_t>(t));
    for (int i = 0; i < t; ++i)
        s.gen_tokens[static_cast<std::size_t>(i)] = rng.uniform_int(
            kGenTokenBase, kGenTokenBase + kGenTokenCount - 1);

    s.validate();
    return s;
}

// Raw per-object affinity of the sample's query, each value in [0,1] and
// computable from features the predictor can observe.
inline Vec affinity_field(const SceneSample& s) {
    Vec aff(s.n);
    switch (s.query_kind) {
        case QueryKind::kAttributeNearest: {
            for (int i = 0; i < s.n; ++i) {
                const double prox = std::exp(-s.centers.row(i).norm() / 3.0);
                const bool match = s.hues[static_cast<std::size_t>(i)] == s.query_hue;
                aff[i] = (match ? 1.0 : 0.2) * prox;
            }
            break;
        }
        case QueryKind::kNearestToPoint: {
            const Eigen::Vector3d p = ref_point(s.query_ref);
            for (int i = 0; i < s.n; ++i)
                aff[i] = std::exp(-(s.centers.row(i).transpose() - p).norm() / 3.0);
            break;
        }
        case QueryKind::kLargest:
        case QueryKind::kSmallest: {
            Vec lv(s.n);
            for (int i = 0; i < s.n; ++i)
                lv[i] = std::log(s.sizes(i, 0) * s.sizes(i, 1) * s.sizes(i, 2));
            const double lo = lv.minCoeff();
            const double hi = lv.maxCoeff();
            const double span = std::max(hi - lo, 1e-12);
            for (int i = 0; i < s.n; ++i) {
                const double up = (lv[i] - lo) / span;
                aff[i] = (s.query_kind == QueryKind::kLargest) ? up : 1.0 - up;
            }
            break;
        }
    }
    return aff;
}

// Ground-truth relevance: softmax over dampened affinities with the target
// pinned to full strength, so the target always carries the largest mass.
inline PlantedRelevance plant_for_scene(const SceneSample& s, double focus, double noise_sigma,
                                        std::uint64_t seed) {
    require(focus > 0.0, "plant_for_scene: focus must be positive");
    require(noise_sigma >= 0.0, "plant_for_scene: sigma must be non-negative");
    Vec a = 0.6 * affinity_field(s);
    for (int id : s.target_object_ids) a[id] = 1.0;
    const Vec logits = focus * a;
    const Vec stable = (logits.array() - logits.maxCoeff()).exp();
    PlantedRelevance plant;
    plant.relevance = stable / stable.sum();
    plant.noise_sigma = noise_sigma;
    plant.seed = seed;
    plant.validate();
    return plant;
}

namespace detail {

// Causal row-stochastic block over the visual tokens whose column self-sums
// equal (v-j) * (c + beta * boost_j). Averaging attention received from rows
// i >= j then divides by (v-j), so the resulting self component is exactly
// affine in the boost: constant c plus beta times the column's boost. Rows
// share one sub-diagonal weight profile w with the diagonal absorbing the
// remainder; w solves the column-sum recurrence in closed form. The tilt
// fraction (share of self mass following the boost) is halved until the
// profile stays a valid distribution; tilt 0 (flat self component) is always
// valid, with w_j = 1/(v+1).
inline Mat tilted_self_block(const Vec& boost, double* tilt_out = nullptr) {
    const int v = static_cast<int>(boost.size());
    const double total_weight = 0.5 * static_cast<double>(v) * static_cast<double>(v + 1);
    double boost_weight = 0.0;
    for (int j = 0; j < v; ++j) boost_weight += static_cast<double>(v - j) * boost[j];

    Vec w = Vec::Zero(v);          // shared sub-diagonal weight per column
    Vec diag = Vec::Zero(v);       // per-row diagonal remainder
    double tilt = 0.25;
    for (;; tilt = (tilt < 1e-6) ? 0.0 : 0.5 * tilt) {
        const double c = (1.0 - tilt) * static_cast<double>(v) / total_weight;
        const double beta = tilt * static_cast<double>(v) / boost_weight;
        bool ok = true;
        double prefix = 0.0;  // sum of w_0..w_{j-1}
        for (int j = 0; j < v; ++j) {
            const double demand = static_cast<double>(v - j) * (c + beta * boost[j]);
            diag[j] = 1.0 - prefix;
            if (j < v - 1) {
                w[j] = (demand - 1.0 + prefix) / static_cast<double>(v - 1 - j);
                if (w[j] < 0.0) {
                    ok = false;
                    break;
                }
                prefix += w[j];
            }
            if (diag[j] < 0.0) {
                ok = false;
                break;
            }
        }
        if (ok) break;
        require(tilt > 0.0, "tilted_self_block: flat profile unexpectedly infeasible");
    }
    if (tilt_out != nullptr) *tilt_out = tilt;

    Mat a = Mat::Zero(v, v);
    for (int i = 0; i < v; ++i) {
        for (int j = 0; j < i; ++j) a(i, j) = w[j];
        a(i, i) = diag[i];
    }
    return a;
}

}  // namespace detail

inline constexpr double kDefaultPlantGain = 4.0;

// Emits a causal attention stack whose aggregated importance recovers the
// plant by construction. Visual rows follow the tilted structural block, so
// the causal-masked self component is exactly c + beta * boost_j. Prompt and
// generated rows are softmaxes whose visual-column weights are the boost
// itself, so their components are exactly proportional to it. The noise-free
// per-token aggregate is therefore strictly increasing in the plant, giving
// exact rank recovery; sigma > 0 jitters every unmasked entry
// multiplicatively in log space.
inline AttentionStack planted_teacher_stack(const SceneSample& sample,
                                            const PlantedRelevance& plant, int layers, int heads,
                                            double kappa = kDefaultPlantGain) {
    sample.validate();
    plant.validate();
    require(layers >= 1 && heads >= 1, "planted_teacher_stack: layers and heads must be positive");
    require(static_cast<int>(plant.relevance.size()) == sample.n,
            "planted_teacher_stack: plant length does not match object count");
    require(kappa > 0.0, "planted_teacher_stack: kappa must be positive");

    const TokenSegmentation seg = sample.segmentation();
    const int v = seg.visual_len();
    const int m = seg.prompt_len;
    const int t = seg.gen_len;
    const int total = seg.total();

    AttentionStack stack;
    stack.layers = layers;
    stack.heads = heads;
    stack.seg = seg;

    // Teacher-forced step confidences in (0.5, 1].
    Rng conf_rng(mix_seed(plant.seed, 0xC04F));
    stack.step_confidences = Vec(t);
    for (int i = 0; i < t; ++i) stack.step_confidences[i] = 1.0 - 0.5 * conf_rng.uniform(0.0, 1.0);

    Vec boost(v);
    for (int j = 0; j < v; ++j) boost[j] = std::exp(kappa * plant.relevance[seg.object_of(j)]);
    const Mat self_block = detail::tilted_self_block(boost);

    // Weights of the prompt/generated row softmax: plant boost over visual
    // columns, unit base over prompt/generated columns.
    Vec wt = Vec::Ones(total);
    wt.head(v) = boost;
    Vec wt_prefix(total);
    double acc = 0.0;
    for (int i = 0; i < total; ++i) {
        acc += wt[i];
        wt_prefix[i] = acc;
    }

    stack.matrices.reserve(static_cast<std::size_t>(layers * heads));
    for (int l = 0; l < layers; ++l) {
        for (int h = 0; h < heads; ++h) {
            Rng noise(mix_seed(plant.seed, 0x10AD0000ull + static_cast<std::uint64_t>(l) * 64 +
                                               static_cast<std::uint64_t>(h)));
            Mat a = Mat::Zero(total, total);
            for (int i = 0; i < total; ++i) {
                if (i < v) {
                    a.row(i).head(i + 1) = self_block.row(i).head(i + 1);
                } else {
                    for (int j = 0; j <= i; ++j) a(i, j) = wt[j] / wt_prefix[i];
                }
                if (plant.noise_sigma > 0.0) {
                    double denom = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        a(i, j) *= std::exp(plant.noise_sigma * noise.normal(0.0, 1.0));
                        denom += a(i, j);
                    }
                    a.row(i).head(i + 1) /= denom;
                }
            }
            stack.matrices.push_back(std::move(a));
        }
    }
    stack.validate();
    return stack;
}

// End-task proxy: the answer survives iff every target object is still in the
// deepest retained set.
inline bool teacher_answer_under_pruning(const SceneSample& sample,
                                         const PruneSchedule& schedule) {
    require(schedule.depth() >= 1, "teacher_answer_under_pruning: empty schedule");
    const std::vector<int>& deepest = schedule.retained_ids.back();
    for (int id : deepest)
        require(id >= 0 && id < sample.n, "teacher_answer_under_pruning: schedule id out of range");
    for (int target : sample.target_object_ids) {
        if (!std::binary_search(deepest.begin(), deepest.end(), target)) return false;
    }
    return true;
}

// --- Serialization -----------------------------------------------------------

inline constexpr int kSceneSchemaVersion = 1;

namespace detail {

inline std::vector<double> flatten(const Mat& m) {
    return std::vector<double>(m.data(), m.data() + m.size());
}

inline Mat unflatten(const std::vector<double>& v, Eigen::Index rows, Eigen::Index cols,
                     const char* what) {
    if (static_cast<Eigen::Index>(v.size()) != rows * cols)
        throw SchemaError(std::string("scene sample: bad element count for ") + what);
    Mat m(rows, cols);
    std::copy(v.begin(), v.end(), m.data());
    return m;
}

}  // namespace detail

inline nlohmann::json to_json(const SceneSample& s) {
    return nlohmann::json{{"schema_version", kSceneSchemaVersion},
                          {"n", s.n},
                          {"d", s.dims.d},
                          {"d_p", s.dims.d_p},
                          {"d_v", s.dims.d_v},
                          {"eo", detail::flatten(s.eo)},
                          {"ep", detail::flatten(s.ep)},
                          {"ev", detail::flatten(s.ev)},
                          {"centers", detail::flatten(s.centers)},
                          {"sizes", detail::flatten(s.sizes)},
                          {"hues", s.hues},
                          {"prompt", s.prompt_tokens},
                          {"generated", s.gen_tokens},
                          {"targets", s.target_object_ids},
                          {"query",
                           {{"kind", static_cast<int>(s.query_kind)},
                            {"hue", s.query_hue},
                            {"ref", s.query_ref}}}};
}

inline SceneSample scene_sample_from_json(const nlohmann::json& j) {
    SceneSample s;
    try {
        if (j.at("schema_version").get<int>() != kSceneSchemaVersion)
            throw SchemaError("scene sample: unsupported schema version");
        s.n = j.at("n").get<int>();
        s.dims.d = j.at("d").get<int>();
        s.dims.d_p = j.at("d_p").get<int>();
        s.dims.d_v = j.at("d_v").get<int>();
        s.eo = detail::unflatten(j.at("eo").get<std::vector<double>>(), s.n, s.dims.d, "eo");
        s.ep = detail::unflatten(j.at("ep").get<std::vector<double>>(), s.n, s.dims.d_p, "ep");
        s.ev = detail::unflatten(j.at("ev").get<std::vector<double>>(), s.n, s.dims.d_v, "ev");
        s.centers = detail::unflatten(j.at("centers").get<std::vector<double>>(), s.n, 3,
                                      "centers");
        s.sizes = detail::unflatten(j.at("sizes").get<std::vector<double>>(), s.n, 3, "sizes");
        s.hues = j.at("hues").get<std::vector<int>>();
        s.prompt_tokens = j.at("prompt").get<std::vector<int>>();
        s.gen_tokens = j.at("generated").get<std::vector<int>>();
        s.target_object_ids = j.at("targets").get<std::vector<int>>();
        const nlohmann::json& q = j.at("query");
        s.query_kind = static_cast<QueryKind>(q.at("kind").get<int>());
        s.query_hue = q.at("hue").get<int>();
        s.query_ref = q.at("ref").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("scene sample: malformed JSON: ") + e.what());
    }
    s.validate();
    return s;
}

inline nlohmann::json to_json(const PlantedRelevance& p) {
    return nlohmann::json{
        {"relevance", std::vector<double>(p.relevance.data(), p.relevance.data() + p.relevance.size())},
        {"noise_sigma", p.noise_sigma},
        {"seed", p.seed}};
}

inline PlantedRelevance planted_relevance_from_json(const nlohmann::json& j) {
    PlantedRelevance p;
    try {
        const auto rel = j.at("relevance").get<std::vector<double>>();
        p.relevance = Eigen::Map<const Vec>(rel.data(), static_cast<Eigen::Index>(rel.size()));
        p.noise_sigma = j.at("noise_sigma").get<double>();
        p.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("planted relevance: malformed JSON: ") + e.what());
    }
    p.validate();
    return p;
}

}  // namespace vtp
