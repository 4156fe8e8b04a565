// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "vtp/attention.hpp"
#include "vtp/common.hpp"
#include "vtp/nn.hpp"
#include "vtp/rng.hpp"
#include "vtp/scenesim.hpp"

namespace vtp {

// --- Configuration -------------------------------------------------------------

struct GapConfig {
    int hidden_dim = 64;
    int num_heads = 4;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int ffn_dim = 128;
    int d_p = 48;
    int d_v = 32;
    int vocab = kVocabSize;
    int max_prompt_len = 16;
    double lambda = 0.02;      // rank-loss weight
    double margin = 0.01;      // rank hinge margin
    double temperature = 0.5;  // target sharpening
    double lr = 8e-4;
    double weight_decay = 0.02;
    int epochs = 36;
    int batch_size = 64;
    std::uint64_t seed = 1;

    void validate() const {
        require(hidden_dim >= 1, "gap config: hidden_dim must be positive");
        require(num_heads >= 1 && hidden_dim % num_heads == 0,
                "gap config: hidden_dim must divide into num_heads");
        require(encoder_layers >= 1 && decoder_layers >= 1,
                "gap config: layer counts must be positive");
        require(ffn_dim >= 1, "gap config: ffn_dim must be positive");
        require(d_p >= 1 && d_v >= 1, "gap config: semantic widths must be positive");
        require(vocab >= 2, "gap config: vocab too small");
        require(max_prompt_len >= 1, "gap config: max_prompt_len must be positive");
        require(lambda >= 0.0, "gap config: lambda must be non-negative");
        require(margin >= 0.0, "gap config: margin must be non-negative");
        require(temperature > 0.0, "gap config: temperature must be positive");
        // lr == 0 is a valid degenerate schedule (leaves parameters untouched).
        require(lr >= 0.0, "gap config: lr must be non-negative");
        require(weight_decay >= 0.0, "gap config: weight_decay must be non-negative");
        require(epochs >= 1, "gap config: epochs must be positive");
        require(batch_size >= 1, "gap config: batch_size must be positive");
    }
};

inline nlohmann::json to_json(const GapConfig& c) {
    return nlohmann::json{{"hidden_dim", c.hidden_dim},
                          {"num_heads", c.num_heads},
                          {"encoder_layers", c.encoder_layers},
                          {"decoder_layers", c.decoder_layers},
                          {"ffn_dim", c.ffn_dim},
                          {"d_p", c.d_p},
                          {"d_v", c.d_v},
                          {"vocab", c.vocab},
                          {"max_prompt_len", c.max_prompt_len},
                          {"lambda", c.lambda},
                          {"margin", c.margin},
                          {"temperature", c.temperature},
                          {"lr", c.lr},
                          {"weight_decay", c.weight_decay},
                          {"epochs", c.epochs},
                          {"batch_size", c.batch_size},
                          {"seed", c.seed}};
}

inline GapConfig gap_config_from_json(const nlohmann::json& j) {
    GapConfig c;
    try {
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.num_heads = j.at("num_heads").get<int>();
        c.encoder_layers = j.at("encoder_layers").get<int>();
        c.decoder_layers = j.at("decoder_layers").get<int>();
        c.ffn_dim = j.at("ffn_dim").get<int>();
        c.d_p = j.at("d_p").get<int>();
        c.d_v = j.at("d_v").get<int>();
        c.vocab = j.at("vocab").get<int>();
        c.max_prompt_len = j.at("max_prompt_len").get<int>();
        c.lambda = j.at("lambda").get<double>();
        c.margin = j.at("margin").get<double>();
        c.temperature = j.at("temperature").get<double>();
        c.lr = j.at("lr").get<double>();
        c.weight_decay = j.at("weight_decay").get<double>();
        c.epochs = j.at("epochs").get<int>();
        c.batch_size = j.at("batch_size").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("gap config: malformed JSON: ") + e.what());
    }
    c.validate();
    return c;
}

// --- Parameter layout ------------------------------------------------------------

enum class SegmentKind : char {
    kWeight = 'w',     // dense matrix, fan-in scaled init
    kBias = 'b',       // zeros (also layernorm shift and distance biases)
    kGain = 'g',       // layernorm scale, ones
    kEmbedding = 'e',  // lookup table rows
};

struct ParamSegment {
    std::string name;
    int rows = 0;
    int cols = 0;
    int offset = 0;
    SegmentKind kind = SegmentKind::kWeight;

    int count() const { return rows * cols; }
};

struct ParamLayout {
    std::vector<ParamSegment> segments;
    int total = 0;

    void add(const std::string& name, int rows, int cols, SegmentKind kind) {
        segments.push_back({name, rows, cols, total, kind});
        total += rows * cols;
    }

    const ParamSegment& at(const std::string& name) const {
        for (const ParamSegment& s : segments)
            if (s.name == name) return s;
        throw std::invalid_argument("param layout: unknown segment " + name);
    }
};

inline Eigen::Map<const Mat> mat_view(const Vec& flat, const ParamSegment& s) {
    return Eigen::Map<const Mat>(flat.data() + s.offset, s.rows, s.cols);
}

inline Eigen::Map<Mat> mat_view(Vec& flat, const ParamSegment& s) {
    return Eigen::Map<Mat>(flat.data() + s.offset, s.rows, s.cols);
}

inline Eigen::Map<const Vec> vec_view(const Vec& flat, const ParamSegment& s) {
    return Eigen::Map<const Vec>(flat.data() + s.offset, s.count());
}

inline Eigen::Map<Vec> vec_view(Vec& flat, const ParamSegment& s) {
    return Eigen::Map<Vec>(flat.data() + s.offset, s.count());
}

inline constexpr int kDistanceBuckets = 8;

inline ParamLayout build_gap_layout(const GapConfig& cfg) {
    const int d = cfg.hidden_dim;
    const int f = cfg.ffn_dim;
    ParamLayout layout;
    auto add_ln = [&](const std::string& pre) {
        layout.add(pre + ".g", d, 1, SegmentKind::kGain);
        layout.add(pre + ".b", d, 1, SegmentKind::kBias);
    };
    auto add_attn = [&](const std::string& pre) {
        for (const char* nm : {"wq", "wk", "wv", "wo"})
            layout.add(pre + "." + nm, d, d, SegmentKind::kWeight);
        for (const char* nm : {"bq", "bk", "bv", "bo"})
            layout.add(pre + "." + nm, d, 1, SegmentKind::kBias);
    };
    auto add_ffn = [&](const std::string& pre) {
        layout.add(pre + ".w1", f, d, SegmentKind::kWeight);
        layout.add(pre + ".b1", f, 1, SegmentKind::kBias);
        layout.add(pre + ".w2", d, f, SegmentKind::kWeight);
        layout.add(pre + ".b2", d, 1, SegmentKind::kBias);
    };

    layout.add("fuse.sem.w1", d, cfg.d_p + cfg.d_v, SegmentKind::kWeight);
    layout.add("fuse.sem.b1", d, 1, SegmentKind::kBias);
    layout.add("fuse.sem.w2", d, d, SegmentKind::kWeight);
    layout.add("fuse.sem.b2", d, 1, SegmentKind::kBias);
    layout.add("fuse.spatial.w", d, 6, SegmentKind::kWeight);
    layout.add("text.tok", cfg.vocab, d, SegmentKind::kEmbedding);
    layout.add("text.pos", cfg.max_prompt_len, d, SegmentKind::kEmbedding);
    for (int e = 0; e < cfg.encoder_layers; ++e) {
        const std::string pre = "text.enc" + std::to_string(e);
        add_ln(pre + ".ln1");
        add_attn(pre + ".attn");
        add_ln(pre + ".ln2");
        add_ffn(pre + ".ffn");
    }
    add_ln("text.ln");
    for (int l = 0; l < cfg.decoder_layers; ++l) {
        const std::string pre = "dec" + std::to_string(l);
        add_ln(pre + ".ln1");
        add_attn(pre + ".self");
        layout.add(pre + ".self.dist_bias", kDistanceBuckets, 1, SegmentKind::kBias);
        add_ln(pre + ".ln2");
        add_attn(pre + ".cross");
        add_ln(pre + ".ln3");
        add_ffn(pre + ".ffn");
    }
    add_ln("obj.ln");
    layout.add("head.w", 1, d, SegmentKind::kWeight);
    return layout;
}

struct GapParams {
    GapConfig config;
    ParamLayout layout;
    Vec values;
};

inline GapParams init_gap_params(const GapConfig& cfg) {
    cfg.validate();
    GapParams p;
    p.config = cfg;
    p.layout = build_gap_layout(cfg);
    p.values = Vec::Zero(p.layout.total);
    Rng rng(mix_seed(cfg.seed, 0x6A9));
    for (const ParamSegment& seg : p.layout.segments) {
        auto view = vec_view(p.values, seg);
        switch (seg.kind) {
            case SegmentKind::kWeight: {
                const double stddev = 1.0 / std::sqrt(static_cast<double>(seg.cols));
                for (int i = 0; i < seg.count(); ++i) view[i] = rng.normal(0.0, stddev);
                break;
            }
            case SegmentKind::kEmbedding:
                for (int i = 0; i < seg.count(); ++i) view[i] = rng.normal(0.0, 0.5);
                break;
            case SegmentKind::kGain:
                view.setOnes();
                break;
            case SegmentKind::kBias:
                view.setZero();
                break;
        }
    }
    return p;
}

// --- Forward -------------------------------------------------------------------

namespace detail {

struct AttnViews {
    Eigen::Map<const Mat> wq, wk, wv, wo;
    Eigen::Map<const Vec> bq, bk, bv, bo;
};

inline AttnViews attn_views(const Vec& flat, const ParamLayout& layout, const std::string& pre) {
    return AttnViews{mat_view(flat, layout.at(pre + ".wq")), mat_view(flat, layout.at(pre + ".wk")),
                     mat_view(flat, layout.at(pre + ".wv")), mat_view(flat, layout.at(pre + ".wo")),
                     vec_view(flat, layout.at(pre + ".bq")), vec_view(flat, layout.at(pre + ".bk")),
                     vec_view(flat, layout.at(pre + ".bv")), vec_view(flat, layout.at(pre + ".bo"))};
}

inline int distance_bucket(double dist) {
    double edge = 0.25;
    for (int b = 0; b < kDistanceBuckets - 1; ++b) {
        if (dist < edge) return b;
        edge *= 2.0;
    }
    return kDistanceBuckets - 1;
}

// F = E^o + MLP_gelu([E^p; E^v]) + W_l [c; z], with W_l bias-free.
inline Mat fuse_forward(const SceneSample& sample, const GapParams& params,
                        nn::LinearCache* sem1_c, Mat* sem_pre, nn::LinearCache* sem2_c,
                        nn::LinearCache* spatial_c) {
    const ParamLayout& layout = params.layout;
    const Vec empty;
    Mat sem_in(sample.n, params.config.d_p + params.config.d_v);
    sem_in << sample.ep, sample.ev;
    *sem_pre = nn::linear_forward(sem_in, mat_view(params.values, layout.at("fuse.sem.w1")),
                                  vec_view(params.values, layout.at("fuse.sem.b1")), sem1_c);
    const Mat sem_act = sem_pre->unaryExpr([](double x) { return nn::gelu(x); });
    const Mat sem_out =
        nn::linear_forward(sem_act, mat_view(params.values, layout.at("fuse.sem.w2")),
                           vec_view(params.values, layout.at("fuse.sem.b2")), sem2_c);
    Mat spatial_in(sample.n, 6);
    spatial_in << sample.centers, sample.sizes;
    const Mat spatial_out = nn::linear_forward(
        spatial_in, mat_view(params.values, layout.at("fuse.spatial.w")), empty, spatial_c);
    return sample.eo + sem_out + spatial_out;
}

}  // namespace detail

// Fused per-object input embeddings, exposed for inspection.
inline Mat fuse_embeddings(const SceneSample& sample, const GapParams& params) {
    require(sample.dims.d == params.config.hidden_dim, "fuse: identifier width mismatch");
    require(sample.dims.d_p == params.config.d_p && sample.dims.d_v == params.config.d_v,
            "fuse: semantic width mismatch");
    nn::LinearCache c1, c2, c3;
    Mat pre;
    return detail::fuse_forward(sample, params, &c1, &pre, &c2, &c3);
}

struct EncBlockCache {
    nn::LayerNormCache ln1;
    Mat ln1_out;
    nn::MhaCache attn;
    nn::LayerNormCache ln2;
    Mat ln2_out;
    nn::LinearCache ffn1;
    Mat ffn_pre;
    nn::LinearCache ffn2;
};

struct DecBlockCache {
    nn::LayerNormCache ln1;
    Mat ln1_out;
    nn::MhaCache self;
    Mat self_bias;  // n x n additive logits from distance buckets
    nn::LayerNormCache ln2;
    Mat ln2_out;
    nn::MhaCache cross;
    nn::LayerNormCache ln3;
    Mat ln3_out;
    nn::LinearCache ffn1;
    Mat ffn_pre;
    nn::LinearCache ffn2;
};

struct GapCache {
    int n = 0;
    int m = 0;
    int total_params = 0;
    std::vector<int> prompt;
    Eigen::MatrixXi buckets;  // n x n pairwise distance buckets
    // fuse
    nn::LinearCache sem1_c;
    Mat sem_pre;
    nn::LinearCache sem2_c;
    nn::LinearCache spatial_c;
    // text
    std::vector<EncBlockCache> enc;
    nn::LayerNormCache text_ln;
    Mat text_out;
    // decoder
    std::vector<DecBlockCache> dec;
    nn::LayerNormCache obj_ln;
    nn::LinearCache head_c;
    Vec ahat;
};

struct GapForwardResult {
    ImportanceMap ahat;
    GapCache cache;
};

// Predicts the per-object importance distribution for one scene. The cache
// holds every intermediate needed for an exact backward pass.
inline GapForwardResult gap_forward(const SceneSample& sample, const GapParams& params) {
    const GapConfig& cfg = params.config;
    const ParamLayout& layout = params.layout;
    require(sample.dims.d == cfg.hidden_dim, "gap_forward: identifier width mismatch");
    require(sample.dims.d_p == cfg.d_p, "gap_forward: 3D semantic width mismatch");
    require(sample.dims.d_v == cfg.d_v, "gap_forward: 2D semantic width mismatch");
    const int n = sample.n;
    const int m = static_cast<int>(sample.prompt_tokens.size());
    require(m <= cfg.max_prompt_len, "gap_forward: prompt longer than position table");
    for (int tok : sample.prompt_tokens)
        require(tok >= 0 && tok < cfg.vocab, "gap_forward: prompt token outside vocabulary");
    const int d = cfg.hidden_dim;
    const Vec empty;

    GapForwardResult out;
    GapCache& c = out.cache;
    c.n = n;
    c.m = m;
    c.total_params = static_cast<int>(params.values.size());
    c.prompt = sample.prompt_tokens;

    Mat x = detail::fuse_forward(sample, params, &c.sem1_c, &c.sem_pre, &c.sem2_c, &c.spatial_c);

    // Text encoder over the prompt tokens.
    const auto tok = mat_view(params.values, layout.at("text.tok"));
    const auto pos = mat_view(params.values, layout.at("text.pos"));
    Mat tx(m, d);
    for (int i = 0; i < m; ++i)
        tx.row(i) = tok.row(sample.prompt_tokens[static_cast<std::size_t>(i)]) + pos.row(i);
    c.enc.resize(static_cast<std::size_t>(cfg.encoder_layers));
    for (int e = 0; e < cfg.encoder_layers; ++e) {
        EncBlockCache& bc = c.enc[static_cast<std::size_t>(e)];
        const std::string pre = "text.enc" + std::to_string(e);
        bc.ln1_out = nn::layernorm_forward(tx, vec_view(params.values, layout.at(pre + ".ln1.g")),
                                           vec_view(params.values, layout.at(pre + ".ln1.b")),
                                           &bc.ln1);
        const detail::AttnViews av = detail::attn_views(params.values, layout, pre + ".attn");
        tx += nn::mha_forward(bc.ln1_out, bc.ln1_out, cfg.num_heads, av.wq, av.bq, av.wk, av.bk,
                              av.wv, av.bv, av.wo, av.bo, nullptr, &bc.attn);
        bc.ln2_out = nn::layernorm_forward(tx, vec_view(params.values, layout.at(pre + ".ln2.g")),
                                           vec_view(params.values, layout.at(pre + ".ln2.b")),
                                           &bc.ln2);
        bc.ffn_pre = nn::linear_forward(bc.ln2_out,
                                        mat_view(params.values, layout.at(pre + ".ffn.w1")),
                                        vec_view(params.values, layout.at(pre + ".ffn.b1")),
                                        &bc.ffn1);
        const Mat act = bc.ffn_pre.unaryExpr([](double v) { return nn::gelu(v); });
        tx += nn::linear_forward(act, mat_view(params.values, layout.at(pre + ".ffn.w2")),
                                 vec_view(params.values, layout.at(pre + ".ffn.b2")), &bc.ffn2);
    }
    c.text_out = nn::layernorm_forward(tx, vec_view(params.values, layout.at("text.ln.g")),
                                       vec_view(params.values, layout.at("text.ln.b")),
                                       &c.text_ln);

    // Pairwise center-distance buckets shared by every decoder layer.
    c.buckets = Eigen::MatrixXi(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double dist = (sample.centers.row(i) - sample.centers.row(j)).norm();
            c.buckets(i, j) = detail::distance_bucket(dist);
        }
    }

    // Spatial decoder over objects with cross-attention to the text.
    c.dec.resize(static_cast<std::size_t>(cfg.decoder_layers));
    for (int l = 0; l < cfg.decoder_layers; ++l) {
        DecBlockCache& bc = c.dec[static_cast<std::size_t>(l)];
        const std::string pre = "dec" + std::to_string(l);
        bc.ln1_out = nn::layernorm_forward(x, vec_view(params.values, layout.at(pre + ".ln1.g")),
                                           vec_view(params.values, layout.at(pre + ".ln1.b")),
                                           &bc.ln1);
        const auto dist_bias = vec_view(params.values, layout.at(pre + ".self.dist_bias"));
        bc.self_bias = Mat(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) bc.self_bias(i, j) = dist_bias[c.buckets(i, j)];
        const detail::AttnViews sv = detail::attn_views(params.values, layout, pre + ".self");
        x += nn::mha_forward(bc.ln1_out, bc.ln1_out, cfg.num_heads, sv.wq, sv.bq, sv.wk, sv.bk,
                             sv.wv, sv.bv, sv.wo, sv.bo, &bc.self_bias, &bc.self);
        bc.ln2_out = nn::layernorm_forward(x, vec_view(params.values, layout.at(pre + ".ln2.g")),
                                           vec_view(params.values, layout.at(pre + ".ln2.b")),
                                           &bc.ln2);
        const detail::AttnViews cv = detail::attn_views(params.values, layout, pre + ".cross");
        x += nn::mha_forward(bc.ln2_out, c.text_out, cfg.num_heads, cv.wq, cv.bq, cv.wk, cv.bk,
                             cv.wv, cv.bv, cv.wo, cv.bo, nullptr, &bc.cross);
        bc.ln3_out = nn::layernorm_forward(x, vec_view(params.values, layout.at(pre + ".ln3.g")),
                                           vec_view(params.values, layout.at(pre + ".ln3.b")),
                                           &bc.ln3);
        bc.ffn_pre = nn::linear_forward(bc.ln3_out,
                                        mat_view(params.values, layout.at(pre + ".ffn.w1")),
                                        vec_view(params.values, layout.at(pre + ".ffn.b1")),
                                        &bc.ffn1);
        const Mat act = bc.ffn_pre.unaryExpr([](double v) { return nn::gelu(v); });
        x += nn::linear_forward(act, mat_view(params.values, layout.at(pre + ".ffn.w2")),
                                vec_view(params.values, layout.at(pre + ".ffn.b2")), &bc.ffn2);
    }
    const Mat xf = nn::layernorm_forward(x, vec_view(params.values, layout.at("obj.ln.g")),
                                         vec_view(params.values, layout.at("obj.ln.b")),
                                         &c.obj_ln);
    const Mat scores =
        nn::linear_forward(xf, mat_view(params.values, layout.at("head.w")), empty, &c.head_c);
    if (!scores.allFinite()) throw std::runtime_error("gap_forward: non-finite activation");
    const Eigen::ArrayXd e = (scores.col(0).array() - scores.col(0).maxCoeff()).exp();
    c.ahat = (e / e.sum()).matrix();
    out.ahat.scores = c.ahat;
    return out;
}

// --- Backward ------------------------------------------------------------------

// Exact gradient of a scalar objective with respect to every parameter, given
// the upstream gradient with respect to the predicted distribution.
inline Vec gap_backward(const GapCache& c, const GapParams& params, const Vec& dl_dahat) {
    const GapConfig& cfg = params.config;
    const ParamLayout& layout = params.layout;
    if (c.total_params != static_cast<int>(params.values.size()) ||
        static_cast<int>(c.ahat.size()) != c.n || dl_dahat.size() != c.ahat.size())
        throw StaleCacheError("gap_backward: cache does not match parameters or upstream shape");
    Vec grad = Vec::Zero(params.values.size());
    Vec empty_grad;

    // Softmax then head.
    const double dot = dl_dahat.dot(c.ahat);
    Mat dscores(c.n, 1);
    dscores.col(0) = c.ahat.array() * (dl_dahat.array() - dot);
    auto dhead = mat_view(grad, layout.at("head.w"));
    Eigen::Map<Vec> no_bias(empty_grad.data(), 0);
    Mat dx = nn::linear_backward(dscores, c.head_c, mat_view(params.values, layout.at("head.w")),
                                 dhead, no_bias);
    {
        auto dg = vec_view(grad, layout.at("obj.ln.g"));
        auto db = vec_view(grad, layout.at("obj.ln.b"));
        dx = nn::layernorm_backward(dx, c.obj_ln, vec_view(params.values, layout.at("obj.ln.g")),
                                    dg, db);
    }

    Mat dtext = Mat::Zero(c.m, cfg.hidden_dim);

    // Decoder blocks in reverse. dx holds the gradient w.r.t. the block output.
    for (int l = cfg.decoder_layers - 1; l >= 0; --l) {
        const DecBlockCache& bc = c.dec[static_cast<std::size_t>(l)];
        const std::string pre = "dec" + std::to_string(l);
        {  // FFN residual
            auto dw2 = mat_view(grad, layout.at(pre + ".ffn.w2"));
            auto db2 = vec_view(grad, layout.at(pre + ".ffn.b2"));
            Mat dact = nn::linear_backward(dx, bc.ffn2,
                                           mat_view(params.values, layout.at(pre + ".ffn.w2")),
                                           dw2, db2);
            dact.array() *= bc.ffn_pre.unaryExpr([](double v) { return nn::gelu_grad(v); }).array();
            auto dw1 = mat_view(grad, layout.at(pre + ".ffn.w1"));
            auto db1 = vec_view(grad, layout.at(pre + ".ffn.b1"));
            const Mat dff_in = nn::linear_backward(
                dact, bc.ffn1, mat_view(params.values, layout.at(pre + ".ffn.w1")), dw1, db1);
            auto dg = vec_view(grad, layout.at(pre + ".ln3.g"));
            auto db = vec_view(grad, layout.at(pre + ".ln3.b"));
            dx += nn::layernorm_backward(dff_in, bc.ln3,
                                         vec_view(params.values, layout.at(pre + ".ln3.g")), dg,
                                         db);
        }
        {  // Cross-attention residual
            const detail::AttnViews av = detail::attn_views(params.values, layout, pre + ".cross");
            auto dwq = mat_view(grad, layout.at(pre + ".cross.wq"));
            auto dwk = mat_view(grad, layout.at(pre + ".cross.wk"));
            auto dwv = mat_view(grad, layout.at(pre + ".cross.wv"));
            auto dwo = mat_view(grad, layout.at(pre + ".cross.wo"));
            auto dbq = vec_view(grad, layout.at(pre + ".cross.bq"));
            auto dbk = vec_view(grad, layout.at(pre + ".cross.bk"));
            auto dbv = vec_view(grad, layout.at(pre + ".cross.bv"));
            auto dbo = vec_view(grad, layout.at(pre + ".cross.bo"));
            const nn::MhaInputGrads g =
                nn::mha_backward(dx, bc.cross, cfg.num_heads, av.wq, dwq, dbq, av.wk, dwk, dbk,
                                 av.wv, dwv, dbv, av.wo, dwo, dbo, nullptr);
            dtext += g.dkv_in;
            auto dg2 = vec_view(grad, layout.at(pre + ".ln2.g"));
            auto db2 = vec_view(grad, layout.at(pre + ".ln2.b"));
            dx += nn::layernorm_backward(g.dq_in, bc.ln2,
                                         vec_view(params.values, layout.at(pre + ".ln2.g")), dg2,
                                         db2);
        }
        {  // Spatial self-attention residual
            const detail::AttnViews av = detail::attn_views(params.values, layout, pre + ".self");
            auto dwq = mat_view(grad, layout.at(pre + ".self.wq"));
            auto dwk = mat_view(grad, layout.at(pre + ".self.wk"));
            auto dwv = mat_view(grad, layout.at(pre + ".self.wv"));
            auto dwo = mat_view(grad, layout.at(pre + ".self.wo"));
            auto dbq = vec_view(grad, layout.at(pre + ".self.bq"));
            auto dbk = vec_view(grad, layout.at(pre + ".self.bk"));
            auto dbv = vec_view(grad, layout.at(pre + ".self.bv"));
            auto dbo = vec_view(grad, layout.at(pre + ".self.bo"));
            Mat dbias = Mat::Zero(c.n, c.n);
            const nn::MhaInputGrads g =
                nn::mha_backward(dx, bc.self, cfg.num_heads, av.wq, dwq, dbq, av.wk, dwk, dbk,
                                 av.wv, dwv, dbv, av.wo, dwo, dbo, &dbias);
            auto ddist = vec_view(grad, layout.at(pre + ".self.dist_bias"));
            for (int i = 0; i < c.n; ++i)
                for (int j = 0; j < c.n; ++j) ddist[c.buckets(i, j)] += dbias(i, j);
            const Mat dln1_out = g.dq_in + g.dkv_in;
            auto dg1 = vec_view(grad, layout.at(pre + ".ln1.g"));
            auto db1 = vec_view(grad, layout.at(pre + ".ln1.b"));
            dx += nn::layernorm_backward(dln1_out, bc.ln1,
                                         vec_view(params.values, layout.at(pre + ".ln1.g")), dg1,
                                         db1);
        }
    }

    // Text path: final layernorm, then encoder blocks in reverse.
    {
        auto dg = vec_view(grad, layout.at("text.ln.g"));
        auto db = vec_view(grad, layout.at("text.ln.b"));
        dtext = nn::layernorm_backward(dtext, c.text_ln,
                                       vec_view(params.values, layout.at("text.ln.g")), dg, db);
    }
    for (int e = cfg.encoder_layers - 1; e >= 0; --e) {
        const EncBlockCache& bc = c.enc[static_cast<std::size_t>(e)];
        const std::string pre = "text.enc" + std::to_string(e);
        {
            auto dw2 = mat_view(grad, layout.at(pre + ".ffn.w2"));
            auto db2 = vec_view(grad, layout.at(pre + ".ffn.b2"));
            Mat dact = nn::linear_backward(dtext, bc.ffn2,
                                           mat_view(params.values, layout.at(pre + ".ffn.w2")),
                                           dw2, db2);
            dact.array() *= bc.ffn_pre.unaryExpr([](double v) { return nn::gelu_grad(v); }).array();
            auto dw1 = mat_view(grad, layout.at(pre + ".ffn.w1"));
            auto db1 = vec_view(grad, layout.at(pre + ".ffn.b1"));
            const Mat dff_in = nn::linear_backward(
                dact, bc.ffn1, mat_view(params.values, layout.at(pre + ".ffn.w1")), dw1, db1);
            auto dg = vec_view(grad, layout.at(pre + ".ln2.g"));
            auto db = vec_view(grad, layout.at(pre + ".ln2.b"));
            dtext += nn::layernorm_backward(dff_in, bc.ln2,
                                            vec_view(params.values, layout.at(pre + ".ln2.g")),
                                            dg, db);
        }
        {
            const detail::AttnViews av = detail::attn_views(params.values, layout, pre + ".attn");
            auto dwq = mat_view(grad, layout.at(pre + ".attn.wq"));
            auto dwk = mat_view(grad, layout.at(pre + ".attn.wk"));
            auto dwv = mat_view(grad, layout.at(pre + ".attn.wv"));
            auto dwo = mat_view(grad, layout.at(pre + ".attn.wo"));
            auto dbq = vec_view(grad, layout.at(pre + ".attn.bq"));
            auto dbk = vec_view(grad, layout.at(pre + ".attn.bk"));
            auto dbv = vec_view(grad, layout.at(pre + ".attn.bv"));
            auto dbo = vec_view(grad, layout.at(pre + ".attn.bo"));
            const nn::MhaInputGrads g =
                nn::mha_backward(dtext, bc.attn, cfg.num_heads, av.wq, dwq, dbq, av.wk, dwk, dbk,
                                 av.wv, dwv, dbv, av.wo, dwo, dbo, nullptr);
            const Mat dln1_out = g.dq_in + g.dkv_in;
            auto dg1 = vec_view(grad, layout.at(pre + ".ln1.g"));
            auto db1 = vec_view(grad, layout.at(pre + ".ln1.b"));
            dtext += nn::layernorm_backward(dln1_out, bc.ln1,
                                            vec_view(params.values, layout.at(pre + ".ln1.g")),
                                            dg1, db1);
        }
    }
    {  // Embedding tables: scatter-add per prompt position.
        auto dtok = mat_view(grad, layout.at("text.tok"));
        auto dpos = mat_view(grad, layout.at("text.pos"));
        for (int i = 0; i < c.m; ++i) {
            dtok.row(c.prompt[static_cast<std::size_t>(i)]) += dtext.row(i);
            dpos.row(i) += dtext.row(i);
        }
    }

    // Fusion: F = E^o + MLP([E^p;E^v]) + W_l [c;z]; dx is dL/dF.
    {
        auto dwl = mat_view(grad, layout.at("fuse.spatial.w"));
        nn::linear_backward(dx, c.spatial_c, mat_view(params.values, layout.at("fuse.spatial.w")),
                            dwl, no_bias);
        auto dw2 = mat_view(grad, layout.at("fuse.sem.w2"));
        auto db2 = vec_view(grad, layout.at("fuse.sem.b2"));
        Mat dact = nn::linear_backward(dx, c.sem2_c,
                                       mat_view(params.values, layout.at("fuse.sem.w2")), dw2,
                                       db2);
        dact.array() *= c.sem_pre.unaryExpr([](double v) { return nn::gelu_grad(v); }).array();
        auto dw1 = mat_view(grad, layout.at("fuse.sem.w1"));
        auto db1 = vec_view(grad, layout.at("fuse.sem.b1"));
        nn::linear_backward(dact, c.sem1_c, mat_view(params.values, layout.at("fuse.sem.w1")),
                            dw1, db1);
    }
    return grad;
}

// --- Objective -------------------------------------------------------------------

struct GapLoss {
    double kl = 0.0;
    double rank = 0.0;
    double total = 0.0;
};

inline constexpr double kKlFloor = 1e-12;

// KL(a || ahat) with an epsilon floor inside the log, plus a margin hinge over
// every strictly ordered pair of the target.
inline GapLoss gap_loss(const Vec& a, const Vec& ahat, double lambda, double margin) {
    require(a.size() == ahat.size(), "gap_loss: length mismatch");
    GapLoss out;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (a[i] <= 0.0) continue;
        out.kl += a[i] * (std::log(a[i]) - std::log(std::max(ahat[i], kKlFloor)));
    }
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        for (Eigen::Index j = 0; j < a.size(); ++j) {
            if (a[i] > a[j]) out.rank += std::max(0.0, ahat[j] - ahat[i] + margin);
        }
    }
    out.total = out.kl + lambda * out.rank;
    return out;
}

inline Vec gap_loss_grad(const Vec& a, const Vec& ahat, double lambda, double margin) {
    require(a.size() == ahat.size(), "gap_loss_grad: length mismatch");
    Vec g = Vec::Zero(a.size());
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (a[i] > 0.0 && ahat[i] > kKlFloor) g[i] -= a[i] / ahat[i];
    }
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        for (Eigen::Index j = 0; j < a.size(); ++j) {
            if (a[i] > a[j] && ahat[j] - ahat[i] + margin > 0.0) {
                g[j] += lambda;
                g[i] -= lambda;
            }
        }
    }
    return g;
}

// --- Optimizer -------------------------------------------------------------------

// Adaptive moments with decoupled weight decay, applied uniformly to every
// parameter.
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    Vec m, v;
    long t = 0;

    explicit AdamW(Eigen::Index size, double decay)
        : weight_decay(decay), m(Vec::Zero(size)), v(Vec::Zero(size)) {}

    void step(Vec& p, const Vec& g, double lr) {
        ++t;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v.array() + (1.0 - beta2) * g.array().square();
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        p.array() -=
            lr * ((m.array() / bc1) / ((v.array() / bc2).sqrt() + eps) + weight_decay * p.array());
    }
};

// --- Training ----------------------------------------------------------------------

struct LossRow {
    int epoch = 0;
    std::string split;
    double kl = 0.0;
    double rank = 0.0;
    double total = 0.0;
};

struct TrainResult {
    GapParams params;
    std::vector<LossRow> history;
    // Epoch whose parameters were kept: the best validation total when a
    // validation split is given, otherwise the final epoch.
    int best_epoch = -1;
};

inline std::string loss_history_to_csv(const std::vector<LossRow>& rows) {
    std::string out = "epoch,split,kl,rank,total\n";
    char buf[192];
    for (const LossRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%s,%.17g,%.17g,%.17g\n", r.epoch, r.split.c_str(),
                      r.kl, r.rank, r.total);
        out += buf;
    }
    return out;
}

namespace detail {

inline GapLoss mean_loss(const std::vector<SceneSample>& scenes, const std::vector<Vec>& targets,
                         const GapParams& params) {
    GapLoss acc;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const GapForwardResult fwd = gap_forward(scenes[i], params);
        const GapLoss l = gap_loss(targets[i], fwd.cache.ahat, params.config.lambda,
                                   params.config.margin);
        acc.kl += l.kl;
        acc.rank += l.rank;
        acc.total += l.total;
    }
    const double inv = 1.0 / static_cast<double>(scenes.size());
    acc.kl *= inv;
    acc.rank *= inv;
    acc.total *= inv;
    return acc;
}

inline std::vector<Vec> sharpen_targets(const std::vector<ImportanceMap>& oracles, double temp) {
    std::vector<Vec> out;
    out.reserve(oracles.size());
    for (const ImportanceMap& o : oracles) out.push_back(sharpen(o, temp).scores);
    return out;
}

}  // namespace detail

// Deterministic minibatch training: seeded shuffling, fixed accumulation
// order, cosine-decayed learning rate per optimizer step.
inline TrainResult train_gap(const std::vector<SceneSample>& scenes,
                             const std::vector<ImportanceMap>& oracles, const GapConfig& cfg,
                             const std::vector<SceneSample>* val_scenes = nullptr,
                             const std::vector<ImportanceMap>* val_oracles = nullptr) {
    cfg.validate();
    if (scenes.empty()) throw std::invalid_argument("train_gap: empty dataset");
    require(scenes.size() == oracles.size(), "train_gap: scene/oracle count mismatch");
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        require(static_cast<int>(oracles[i].scores.size()) == scenes[i].n,
                "train_gap: oracle length does not match scene");
    }
    if (val_scenes != nullptr) {
        require(val_oracles != nullptr && val_scenes->size() == val_oracles->size(),
                "train_gap: malformed validation split");
    }

    TrainResult result;
    result.params = init_gap_params(cfg);
    GapParams& params = result.params;
    const std::vector<Vec> targets = detail::sharpen_targets(oracles, cfg.temperature);
    std::vector<Vec> val_targets;
    if (val_scenes != nullptr)
        val_targets = detail::sharpen_targets(*val_oracles, cfg.temperature);

    const int sample_count = static_cast<int>(scenes.size());
    const int batches_per_epoch = (sample_count + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = static_cast<long>(batches_per_epoch) * cfg.epochs;
    AdamW opt(params.values.size(), cfg.weight_decay);
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5481FF1Eull));
    std::vector<int> order(static_cast<std::size_t>(sample_count));
    std::iota(order.begin(), order.end(), 0);

    long step = 0;
    double best_val_total = std::numeric_limits<double>::infinity();
    Vec best_values;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
        GapLoss epoch_acc;
        for (int b = 0; b < batches_per_epoch; ++b) {
            const int begin = b * cfg.batch_size;
            const int end = std::min(begin + cfg.batch_size, sample_count);
            Vec grad = Vec::Zero(params.values.size());
            for (int k = begin; k < end; ++k) {
                const int idx = order[static_cast<std::size_t>(k)];
                const GapForwardResult fwd = gap_forward(scenes[static_cast<std::size_t>(idx)],
                                                         params);
                const GapLoss l = gap_loss(targets[static_cast<std::size_t>(idx)], fwd.cache.ahat,
                                           cfg.lambda, cfg.margin);
                if (!std::isfinite(l.total)) throw std::runtime_error("train_gap: diverged loss");
                epoch_acc.kl += l.kl;
                epoch_acc.rank += l.rank;
                epoch_acc.total += l.total;
                const Vec dl = gap_loss_grad(targets[static_cast<std::size_t>(idx)],
                                             fwd.cache.ahat, cfg.lambda, cfg.margin);
                grad += gap_backward(fwd.cache, params, dl);
            }
            grad /= static_cast<double>(end - begin);
            const double lr_t =
                cfg.lr * 0.5 *
                (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                static_cast<double>(total_steps)));
            opt.step(params.values, grad, lr_t);
            ++step;
        }
        const double inv = 1.0 / static_cast<double>(sample_count);
        result.history.push_back(
            {epoch, "train", epoch_acc.kl * inv, epoch_acc.rank * inv, epoch_acc.total * inv});
        if (val_scenes != nullptr && !val_scenes->empty()) {
            const GapLoss vl = detail::mean_loss(*val_scenes, val_targets, params);
            result.history.push_back({epoch, "val", vl.kl, vl.rank, vl.total});
            // Early-stopping selection: keep the parameters of the epoch with
            // the lowest validation total. Strict inequality keeps the
            // earliest such epoch, so reruns pick the same snapshot.
            if (vl.total < best_val_total) {
                best_val_total = vl.total;
                best_values = params.values;
                result.best_epoch = epoch;
            }
        } else {
            result.best_epoch = epoch;
        }
    }
    if (result.best_epoch >= 0 && best_values.size() == params.values.size()) {
        params.values = best_values;
    }
    return result;
}

// --- Evaluation --------------------------------------------------------------------

// Indices of the k largest entries, value-descending, ties broken by lower index.
inline std::vector<int> top_k_indices(const Vec& v, int k) {
    std::vector<int> idx(static_cast<std::size_t>(v.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[a] > v[b]; });
    idx.resize(static_cast<std::size_t>(std::min<Eigen::Index>(k, v.size())));
    return idx;
}

inline double top_k_overlap(const Vec& pred, const Vec& truth, int k) {
    require(pred.size() == truth.size(), "top_k_overlap: length mismatch");
    require(k >= 1, "top_k_overlap: k must be positive");
    const std::vector<int> p = top_k_indices(pred, k);
    const std::vector<int> t = top_k_indices(truth, k);
    int hits = 0;
    for (int i : p)
        if (std::find(t.begin(), t.end(), i) != t.end()) ++hits;
    return static_cast<double>(hits) / static_cast<double>(t.size());
}

struct GapEvalStats {
    double mean_kl = 0.0;
    double mean_rank = 0.0;
    double mean_total = 0.0;
    double mean_recall = 0.0;  // top-k overlap between prediction and oracle
    int count = 0;
};

inline GapEvalStats evaluate_gap(const std::vector<SceneSample>& scenes,
                                 const std::vector<ImportanceMap>& oracles,
                                 const GapParams& params, int k = 10) {
    require(scenes.size() == oracles.size(), "evaluate_gap: scene/oracle count mismatch");
    require(!scenes.empty(), "evaluate_gap: empty dataset");
    const GapConfig& cfg = params.config;
    GapEvalStats stats;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const GapForwardResult fwd = gap_forward(scenes[i], params);
        const Vec target = sharpen(oracles[i], cfg.temperature).scores;
        const GapLoss l = gap_loss(target, fwd.cache.ahat, cfg.lambda, cfg.margin);
        stats.mean_kl += l.kl;
        stats.mean_rank += l.rank;
        stats.mean_total += l.total;
        stats.mean_recall += top_k_overlap(fwd.cache.ahat, oracles[i].scores, k);
    }
    const double inv = 1.0 / static_cast<double>(scenes.size());
    stats.mean_kl *= inv;
    stats.mean_rank *= inv;
    stats.mean_total *= inv;
    stats.mean_recall *= inv;
    stats.count = static_cast<int>(scenes.size());
    return stats;
}

// --- Checkpointing ----------------------------------------------------------------

inline constexpr int kCheckpointSchemaVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline void save_gap_checkpoint(const std::string& bin_path, const std::string& manifest_path,
                                const GapParams& params,
                                const nlohmann::json& extra = nlohmann::json::object()) {
    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("cannot open checkpoint for writing: " + bin_path);
    bin.write(reinterpret_cast<const char*>(params.values.data()),
              static_cast<std::streamsize>(sizeof(double) * params.values.size()));
    if (!bin) throw std::runtime_error("checkpoint write failed: " + bin_path);
    bin.close();

    nlohmann::json segs = nlohmann::json::array();
    for (const ParamSegment& s : params.layout.segments) {
        segs.push_back({{"name", s.name},
                        {"rows", s.rows},
                        {"cols", s.cols},
                        {"offset", s.offset}});
    }
    const nlohmann::json manifest{{"schema_version", kCheckpointSchemaVersion},
                                  {"total", params.layout.total},
                                  {"config", to_json(params.config)},
                                  {"segments", segs},
                                  {"extra", extra}};
    std::ofstream mf(manifest_path, std::ios::trunc);
    if (!mf) throw std::runtime_error("cannot open manifest for writing: " + manifest_path);
    mf << manifest.dump(2) << "\n";
}

inline GapParams load_gap_checkpoint(const std::string& bin_path,
                                     const std::string& manifest_path,
                                     nlohmann::json* extra_out = nullptr) {
    std::ifstream mf(manifest_path);
    if (!mf) throw MissingArtifactError("checkpoint manifest not found: " + manifest_path);
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("checkpoint manifest: malformed JSON: ") + e.what());
    }
    GapParams params;
    try {
        if (manifest.at("schema_version").get<int>() != kCheckpointSchemaVersion)
            throw SchemaError("checkpoint manifest: unsupported schema version");
        params.config = gap_config_from_json(manifest.at("config"));
        params.layout = build_gap_layout(params.config);
        if (manifest.at("total").get<int>() != params.layout.total)
            throw SchemaError("checkpoint manifest: parameter count mismatch");
        if (extra_out != nullptr) *extra_out = manifest.value("extra", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("checkpoint manifest: malformed JSON: ") + e.what());
    }

    std::ifstream bin(bin_path, std::ios::binary | std::ios::ate);
    if (!bin) throw MissingArtifactError("checkpoint weights not found: " + bin_path);
    const std::streamsize bytes = bin.tellg();
    if (bytes != static_cast<std::streamsize>(sizeof(double) * params.layout.total))
        throw SchemaError("checkpoint weights: size does not match manifest");
    bin.seekg(0);
    params.values = Vec(params.layout.total);
    bin.read(reinterpret_cast<char*>(params.values.data()), bytes);
    if (!bin) throw SchemaError("checkpoint weights: short read");
    if (!params.values.allFinite()) throw SchemaError("checkpoint weights: non-finite values");
    return params;
}

// --- Cost accounting ---------------------------------------------------------------

// Forward cost of one prediction in FLOPs (one per multiply-accumulate),
// counting dense projections and attention contractions.
inline double gap_forward_flops(const GapConfig& cfg, int n_objects, int prompt_len) {
    const double n = static_cast<double>(n_objects);
    const double m = static_cast<double>(prompt_len);
    const double d = static_cast<double>(cfg.hidden_dim);
    const double f = static_cast<double>(cfg.ffn_dim);
    const double fuse = n * d * static_cast<double>(cfg.d_p + cfg.d_v) + n * d * d + n * d * 6.0;
    const double enc =
        static_cast<double>(cfg.encoder_layers) * (4.0 * m * d * d + 2.0 * m * m * d +
                                                   2.0 * m * d * f);
    const double dec = static_cast<double>(cfg.decoder_layers) *
                       ((4.0 * n * d * d + 2.0 * n * n * d) +
                        (2.0 * n * d * d + 2.0 * m * d * d + 2.0 * n * m * d) +
                        2.0 * n * d * f);
    const double head = n * d;
    return fuse + enc + dec + head;
}

}  // namespace vtp
