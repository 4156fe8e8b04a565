// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "vtp/gapnet.hpp"
#include "vtp/pruning.hpp"
#include "vtp/rng.hpp"
#include "vtp/scenesim.hpp"

namespace {

// Scene constructed directly, without the simulator, so the network can be
// exercised at widths far below the simulator's feature-layout minimums.
vtp::SceneSample make_raw_sample(int n, vtp::SceneDims dims, int m, int vocab,
                                 std::uint64_t seed) {
    vtp::Rng rng(seed);
    vtp::SceneSample s;
    s.n = n;
    s.dims = dims;
    s.eo = vtp::Mat(n, dims.d);
    s.ep = vtp::Mat(n, dims.d_p);
    s.ev = vtp::Mat(n, dims.d_v);
    s.centers = vtp::Mat(n, 3);
    s.sizes = vtp::Mat(n, 3);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < dims.d; ++k) s.eo(i, k) = rng.normal(0.0, 1.0);
        for (int k = 0; k < dims.d_p; ++k) s.ep(i, k) = rng.normal(0.0, 1.0);
        for (int k = 0; k < dims.d_v; ++k) s.ev(i, k) = rng.normal(0.0, 1.0);
        for (int k = 0; k < 3; ++k) {
            s.centers(i, k) = rng.uniform(-4.0, 4.0);
            s.sizes(i, k) = rng.uniform(0.2, 1.5);
        }
        s.hues.push_back(rng.uniform_int(0, vtp::kHueCount - 1));
    }
    for (int i = 0; i < m; ++i) s.prompt_tokens.push_back(rng.uniform_int(0, vocab - 1));
    s.gen_tokens.push_back(vtp::kGenTokenBase);
    s.target_object_ids.push_back(0);
    return s;
}

double objective_at(const vtp::SceneSample& s, const vtp::GapConfig& cfg,
                    const vtp::ParamLayout& layout, const vtp::Vec& values,
                    const vtp::Vec& target) {
    const vtp::GapParams p{cfg, layout, values};
    const vtp::GapForwardResult fwd = vtp::gap_forward(s, p);
    return vtp::gap_loss(target, fwd.cache.ahat, cfg.lambda, cfg.margin).total;
}

// Central-difference check of every parameter segment against the analytic
// gradient of the full objective.
void check_gradients(const vtp::GapConfig& cfg, int n, int m, std::uint64_t seed) {
    vtp::SceneDims dims{cfg.hidden_dim, cfg.d_p, cfg.d_v};
    const vtp::SceneSample sample = make_raw_sample(n, dims, m, cfg.vocab, seed);
    vtp::Rng trng(vtp::mix_seed(seed, 77));
    const vtp::Vec target = testkit::random_simplex(trng, n);

    const vtp::GapParams params = vtp::init_gap_params(cfg);
    const vtp::GapForwardResult fwd = vtp::gap_forward(sample, params);
    const vtp::Vec dl = vtp::gap_loss_grad(target, fwd.cache.ahat, cfg.lambda, cfg.margin);
    const vtp::Vec analytic = vtp::gap_backward(fwd.cache, params, dl);

    const double h = 1e-5;
    for (const vtp::ParamSegment& seg : params.layout.segments) {
        const int probes = std::min(6, seg.count());
        for (int k = 0; k < probes; ++k) {
            const int idx = seg.offset + (k * seg.count()) / probes;
            vtp::Vec nudged = params.values;
            nudged[idx] += h;
            const double up = objective_at(sample, cfg, params.layout, nudged, target);
            nudged[idx] -= 2.0 * h;
            const double down = objective_at(sample, cfg, params.layout, nudged, target);
            const double fd = (up - down) / (2.0 * h);
            const double got = analytic[idx];
            INFO("segment " << seg.name << " flat index " << idx << " fd " << fd << " analytic "
                            << got);
            REQUIRE(std::abs(fd - got) <=
                    1e-6 + 1e-5 * std::max(std::abs(fd), std::abs(got)));
        }
    }
}

vtp::GapConfig tiny_config_a() {
    vtp::GapConfig cfg;
    cfg.hidden_dim = 8;
    cfg.num_heads = 2;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.ffn_dim = 16;
    cfg.d_p = 6;
    cfg.d_v = 5;
    cfg.vocab = 16;
    cfg.max_prompt_len = 4;
    return cfg;
}

vtp::GapConfig tiny_config_b() {
    vtp::GapConfig cfg;
    cfg.hidden_dim = 12;
    cfg.num_heads = 3;
    cfg.encoder_layers = 2;
    cfg.decoder_layers = 2;
    cfg.ffn_dim = 20;
    cfg.d_p = 7;
    cfg.d_v = 6;
    cfg.vocab = 16;
    cfg.max_prompt_len = 4;
    return cfg;
}

}  // namespace

TEST_CASE("fusion reduces to the identifier embeddings when other paths are zeroed") {
    vtp::GapConfig cfg = tiny_config_a();
    vtp::GapParams params = vtp::init_gap_params(cfg);
    for (const char* name : {"fuse.sem.w1", "fuse.sem.b1", "fuse.sem.w2", "fuse.sem.b2",
                             "fuse.spatial.w"}) {
        vtp::vec_view(params.values, params.layout.at(name)).setZero();
    }
    const vtp::SceneSample s =
        make_raw_sample(4, {cfg.hidden_dim, cfg.d_p, cfg.d_v}, 2, cfg.vocab, 11);
    const vtp::Mat fused = vtp::fuse_embeddings(s, params);
    REQUIRE((fused - s.eo).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("fusion matches a hand computation on a one-object scene") {
    vtp::GapConfig cfg;
    cfg.hidden_dim = 1;
    cfg.num_heads = 1;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.ffn_dim = 2;
    cfg.d_p = 1;
    cfg.d_v = 1;
    cfg.vocab = 16;
    cfg.max_prompt_len = 4;
    vtp::GapParams params = vtp::init_gap_params(cfg);

    vtp::SceneSample s;
    s.n = 1;
    s.dims = {1, 1, 1};
    s.eo = vtp::Mat::Constant(1, 1, 0.7);
    s.ep = vtp::Mat::Constant(1, 1, 2.0);
    s.ev = vtp::Mat::Constant(1, 1, 4.0);
    s.centers = vtp::Mat(1, 3);
    s.centers << 1.0, 2.0, 3.0;
    s.sizes = vtp::Mat(1, 3);
    s.sizes << 0.5, 0.6, 0.7;
    s.hues = {0};
    s.prompt_tokens = {1};
    s.gen_tokens = {vtp::kGenTokenBase};
    s.target_object_ids = {0};

    auto w1 = vtp::vec_view(params.values, params.layout.at("fuse.sem.w1"));
    w1[0] = 0.5;
    w1[1] = -1.0;
    vtp::vec_view(params.values, params.layout.at("fuse.sem.b1"))[0] = 0.25;
    vtp::vec_view(params.values, params.layout.at("fuse.sem.w2"))[0] = 2.0;
    vtp::vec_view(params.values, params.layout.at("fuse.sem.b2"))[0] = 0.3;
    auto wl = vtp::vec_view(params.values, params.layout.at("fuse.spatial.w"));
    wl[0] = 0.1;
    wl[1] = 0.2;
    wl[2] = 0.3;
    wl[3] = -0.1;
    wl[4] = -0.2;
    wl[5] = -0.3;

    const double pre = 0.5 * 2.0 - 1.0 * 4.0 + 0.25;
    const double act = 0.5 * pre * (1.0 + std::erf(pre / std::sqrt(2.0)));
    const double sem = 2.0 * act + 0.3;
    const double spatial = 0.1 * 1.0 + 0.2 * 2.0 + 0.3 * 3.0 - 0.1 * 0.5 - 0.2 * 0.6 - 0.3 * 0.7;
    const double expected = 0.7 + sem + spatial;

    const vtp::Mat fused = vtp::fuse_embeddings(s, params);
    REQUIRE(fused(0, 0) == Catch::Approx(expected).margin(1e-14));
}

TEST_CASE("predictions form a probability simplex over the scene's objects") {
    const vtp::GapConfig cfg;
    const vtp::GapParams params = vtp::init_gap_params(cfg);
    const vtp::SceneSample s = vtp::generate_scene(12, vtp::SceneDims{}, 42);
    const vtp::GapForwardResult fwd = vtp::gap_forward(s, params);
    REQUIRE(fwd.ahat.scores.size() == 12);
    REQUIRE(vtp::is_simplex(fwd.ahat.scores));
    fwd.ahat.validate();
}

TEST_CASE("permuting object order permutes the prediction") {
    const vtp::GapConfig cfg;
    const vtp::GapParams params = vtp::init_gap_params(cfg);
    const vtp::SceneSample s = vtp::generate_scene(6, vtp::SceneDims{}, 9);

    vtp::SceneSample rev = s;
    for (int i = 0; i < s.n; ++i) {
        const int src = s.n - 1 - i;
        rev.eo.row(i) = s.eo.row(src);
        rev.ep.row(i) = s.ep.row(src);
        rev.ev.row(i) = s.ev.row(src);
        rev.centers.row(i) = s.centers.row(src);
        rev.sizes.row(i) = s.sizes.row(src);
        rev.hues[static_cast<std::size_t>(i)] = s.hues[static_cast<std::size_t>(src)];
    }

    const vtp::Vec base = vtp::gap_forward(s, params).ahat.scores;
    const vtp::Vec perm = vtp::gap_forward(rev, params).ahat.scores;
    for (int i = 0; i < s.n; ++i) {
        REQUIRE(perm[i] == Catch::Approx(base[s.n - 1 - i]).margin(1e-9));
    }
}

TEST_CASE("objects with identical features receive identical scores") {
    vtp::GapConfig cfg = tiny_config_a();
    const vtp::GapParams params = vtp::init_gap_params(cfg);
    vtp::SceneSample s =
        make_raw_sample(5, {cfg.hidden_dim, cfg.d_p, cfg.d_v}, 3, cfg.vocab, 23);
    s.eo.row(3) = s.eo.row(1);
    s.ep.row(3) = s.ep.row(1);
    s.ev.row(3) = s.ev.row(1);
    s.centers.row(3) = s.centers.row(1);
    s.sizes.row(3) = s.sizes.row(1);
    const vtp::Vec ahat = vtp::gap_forward(s, params).ahat.scores;
    REQUIRE(std::abs(ahat[1] - ahat[3]) < 1e-12);
}

TEST_CASE("kl term matches a hand-computed value") {
    vtp::Vec a(2), ahat(2);
    a << 0.5, 0.5;
    ahat << 0.25, 0.75;
    const vtp::GapLoss l = vtp::gap_loss(a, ahat, 0.0, 0.01);
    const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    REQUIRE(l.kl == Catch::Approx(expected).margin(1e-12));
    REQUIRE(l.rank >= 0.0);
    REQUIRE(l.total == Catch::Approx(l.kl).margin(1e-15));
}

TEST_CASE("rank hinge matches a hand-computed value") {
    vtp::Vec a(2), ahat(2);
    a << 0.7, 0.3;
    ahat << 0.4, 0.5;
    const vtp::GapLoss l = vtp::gap_loss(a, ahat, 1.0, 0.05);
    REQUIRE(l.rank == Catch::Approx(0.15).margin(1e-12));
    REQUIRE(l.total == Catch::Approx(l.kl + 0.15).margin(1e-12));
}

TEST_CASE("loss vanishes when the prediction equals a well separated target") {
    vtp::Vec a(3);
    a << 0.6, 0.3, 0.1;
    const vtp::GapLoss l = vtp::gap_loss(a, a, 0.02, 0.01);
    REQUIRE(l.kl == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(l.rank == 0.0);
    REQUIRE(l.total == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("loss gradient matches finite differences in prediction space") {
    vtp::Rng rng(314);
    const vtp::Vec a = testkit::random_simplex(rng, 6);
    vtp::Vec ahat = testkit::random_simplex(rng, 6);
    const double lambda = 0.02;
    const double margin = 0.01;
    const vtp::Vec g = vtp::gap_loss_grad(a, ahat, lambda, margin);
    const double h = 1e-7;
    for (int i = 0; i < 6; ++i) {
        vtp::Vec up = ahat, down = ahat;
        up[i] += h;
        down[i] -= h;
        const double fd = (vtp::gap_loss(a, up, lambda, margin).total -
                           vtp::gap_loss(a, down, lambda, margin).total) /
                          (2.0 * h);
        REQUIRE(fd == Catch::Approx(g[i]).margin(1e-5));
    }
}

TEST_CASE("network gradient matches finite differences on every segment") {
    for (std::uint64_t seed : {101ull, 202ull, 303ull}) {
        check_gradients(tiny_config_a(), 3, 2, seed);
    }
    check_gradients(tiny_config_b(), 4, 3, 404);
}

TEST_CASE("zero upstream gradient yields an exactly zero parameter gradient") {
    const vtp::GapConfig cfg = tiny_config_a();
    const vtp::GapParams params = vtp::init_gap_params(cfg);
    const vtp::SceneSample s =
        make_raw_sample(3, {cfg.hidden_dim, cfg.d_p, cfg.d_v}, 2, cfg.vocab, 5);
    const vtp::GapForwardResult fwd = vtp::gap_forward(s, params);
    const vtp::Vec grad = vtp::gap_backward(fwd.cache, params, vtp::Vec::Zero(s.n));
    REQUIRE(grad.isZero(0.0));
}

TEST_CASE("backward rejects a cache from a different network shape") {
    const vtp::GapConfig cfg_a = tiny_config_a();
    vtp::GapConfig cfg_b = tiny_config_a();
    cfg_b.hidden_dim = 16;
    cfg_b.num_heads = 2;
    const vtp::GapParams pa = vtp::init_gap_params(cfg_a);
    const vtp::GapParams pb = vtp::init_gap_params(cfg_b);
    const vtp::SceneSample s =
        make_raw_sample(3, {cfg_a.hidden_dim, cfg_a.d_p, cfg_a.d_v}, 2, cfg_a.vocab, 5);
    const vtp::GapForwardResult fwd = vtp::gap_forward(s, pa);
    REQUIRE_THROWS_AS(vtp::gap_backward(fwd.cache, pb, vtp::Vec::Zero(3)), vtp::StaleCacheError);
    REQUIRE_THROWS_AS(vtp::gap_backward(fwd.cache, pa, vtp::Vec::Zero(5)), vtp::StaleCacheError);
}

TEST_CASE("forward validates prompt tokens and lengths") {
    const vtp::GapConfig cfg = tiny_config_a();
    const vtp::GapParams params = vtp::init_gap_params(cfg);
    vtp::SceneSample s =
        make_raw_sample(3, {cfg.hidden_dim, cfg.d_p, cfg.d_v}, 2, cfg.vocab, 5);
    vtp::SceneSample bad_tok = s;
    bad_tok.prompt_tokens[0] = cfg.vocab;
    REQUIRE_THROWS_AS(vtp::gap_forward(bad_tok, params), std::invalid_argument);
    vtp::SceneSample long_prompt = s;
    long_prompt.prompt_tokens.assign(static_cast<std::size_t>(cfg.max_prompt_len) + 1, 1);
    REQUIRE_THROWS_AS(vtp::gap_forward(long_prompt, params), std::invalid_argument);
}

TEST_CASE("a single scene can be memorized") {
    vtp::GapConfig cfg;
    cfg.hidden_dim = 16;
    cfg.num_heads = 2;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.ffn_dim = 32;
    cfg.d_p = 25;
    cfg.d_v = 16;
    cfg.epochs = 200;
    cfg.batch_size = 1;
    cfg.lr = 2e-3;
    cfg.seed = 7;

    const vtp::SceneDims dims{cfg.hidden_dim, cfg.d_p, cfg.d_v};
    const vtp::SceneSample scene = vtp::generate_scene(6, dims, 3);
    const vtp::PlantedRelevance plant = vtp::plant_for_scene(scene, 6.0, 0.0, 3);
    const std::vector<vtp::SceneSample> scenes{scene};
    const std::vector<vtp::ImportanceMap> oracles{vtp::ImportanceMap{plant.relevance}};

    const vtp::TrainResult result = vtp::train_gap(scenes, oracles, cfg);
    REQUIRE(result.history.front().split == "train");
    REQUIRE(result.history.back().total < 0.2 * result.history.front().total);

    const vtp::Vec ahat = vtp::gap_forward(scene, result.params).ahat.scores;
    int pred_arg = 0, true_arg = 0;
    ahat.maxCoeff(&pred_arg);
    plant.relevance.maxCoeff(&true_arg);
    REQUIRE(pred_arg == true_arg);
}

TEST_CASE("zero learning rate leaves parameters bitwise unchanged") {
    vtp::GapConfig cfg = tiny_config_a();
    cfg.lr = 0.0;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.seed = 13;

    const vtp::SceneDims dims{cfg.hidden_dim, cfg.d_p, cfg.d_v};
    std::vector<vtp::SceneSample> scenes;
    std::vector<vtp::ImportanceMap> oracles;
    vtp::Rng rng(99);
    for (int i = 0; i < 3; ++i) {
        scenes.push_back(make_raw_sample(4, dims, 2, cfg.vocab, 50 + i));
        oracles.push_back(vtp::ImportanceMap{testkit::random_simplex(rng, 4)});
    }
    const vtp::TrainResult result = vtp::train_gap(scenes, oracles, cfg);
    const vtp::GapParams fresh = vtp::init_gap_params(cfg);
    REQUIRE(result.params.values.size() == fresh.values.size());
    for (Eigen::Index i = 0; i < fresh.values.size(); ++i) {
        REQUIRE(result.params.values[i] == fresh.values[i]);
    }
}

TEST_CASE("training is deterministic end to end") {
    vtp::GapConfig cfg = tiny_config_a();
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.seed = 21;

    const vtp::SceneDims dims{cfg.hidden_dim, cfg.d_p, cfg.d_v};
    std::vector<vtp::SceneSample> scenes;
    std::vector<vtp::ImportanceMap> oracles;
    vtp::Rng rng(1234);
    for (int i = 0; i < 5; ++i) {
        scenes.push_back(make_raw_sample(4, dims, 2, cfg.vocab, 500 + i));
        oracles.push_back(vtp::ImportanceMap{testkit::random_simplex(rng, 4)});
    }
    const vtp::TrainResult r1 = vtp::train_gap(scenes, oracles, cfg, &scenes, &oracles);
    const vtp::TrainResult r2 = vtp::train_gap(scenes, oracles, cfg, &scenes, &oracles);
    REQUIRE(r1.params.values.size() == r2.params.values.size());
    for (Eigen::Index i = 0; i < r1.params.values.size(); ++i) {
        REQUIRE(r1.params.values[i] == r2.params.values[i]);
    }
    REQUIRE(r1.history.size() == r2.history.size());
    for (std::size_t i = 0; i < r1.history.size(); ++i) {
        REQUIRE(r1.history[i].epoch == r2.history[i].epoch);
        REQUIRE(r1.history[i].split == r2.history[i].split);
        REQUIRE(r1.history[i].total == r2.history[i].total);
    }
    REQUIRE(vtp::loss_history_to_csv(r1.history) == vtp::loss_history_to_csv(r2.history));
}

TEST_CASE("training rejects an empty or mismatched dataset") {
    const vtp::GapConfig cfg = tiny_config_a();
    REQUIRE_THROWS_AS(vtp::train_gap({}, {}, cfg), std::invalid_argument);
    const vtp::SceneDims dims{cfg.hidden_dim, cfg.d_p, cfg.d_v};
    std::vector<vtp::SceneSample> scenes{make_raw_sample(4, dims, 2, cfg.vocab, 1)};
    std::vector<vtp::ImportanceMap> oracles{vtp::ImportanceMap{vtp::Vec::Constant(3, 1.0 / 3)}};
    REQUIRE_THROWS_AS(vtp::train_gap(scenes, oracles, cfg), std::invalid_argument);
}

TEST_CASE("checkpoints round trip bitwise") {
    vtp::GapConfig cfg = tiny_config_b();
    cfg.seed = 31;
    const vtp::GapParams params = vtp::init_gap_params(cfg);
    const std::string bin = "ckpt_roundtrip.bin";
    const std::string manifest = "ckpt_roundtrip.json";
    const nlohmann::json extra{{"epochs_run", 3}};
    vtp::save_gap_checkpoint(bin, manifest, params, extra);

    nlohmann::json extra_out;
    const vtp::GapParams loaded = vtp::load_gap_checkpoint(bin, manifest, &extra_out);
    REQUIRE(extra_out.at("epochs_run").get<int>() == 3);
    REQUIRE(loaded.config.hidden_dim == cfg.hidden_dim);
    REQUIRE(loaded.config.seed == cfg.seed);
    REQUIRE(loaded.layout.total == params.layout.total);
    for (Eigen::Index i = 0; i < params.values.size(); ++i) {
        REQUIRE(loaded.values[i] == params.values[i]);
    }
    std::remove(bin.c_str());
    std::remove(manifest.c_str());
}

TEST_CASE("checkpoint loading rejects missing and truncated artifacts") {
    vtp::GapConfig cfg = tiny_config_a();
    const vtp::GapParams params = vtp::init_gap_params(cfg);
    const std::string bin = "ckpt_bad.bin";
    const std::string manifest = "ckpt_bad.json";
    vtp::save_gap_checkpoint(bin, manifest, params);

    REQUIRE_THROWS_AS(vtp::load_gap_checkpoint("no_such.bin", manifest),
                      vtp::MissingArtifactError);
    REQUIRE_THROWS_AS(vtp::load_gap_checkpoint(bin, "no_such.json"), vtp::MissingArtifactError);

    {
        std::ifstream in(bin, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
        std::ofstream out(bin, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 8));
    }
    REQUIRE_THROWS_AS(vtp::load_gap_checkpoint(bin, manifest), vtp::SchemaError);
    std::remove(bin.c_str());
    std::remove(manifest.c_str());
}

TEST_CASE("evaluation reports perfect recall for an oracle-matching predictor") {
    vtp::Vec pred(5), truth(5);
    pred << 0.4, 0.3, 0.1, 0.15, 0.05;
    truth << 0.5, 0.2, 0.1, 0.15, 0.05;
    REQUIRE(vtp::top_k_overlap(pred, truth, 2) == 1.0);
    REQUIRE(vtp::top_k_overlap(pred, truth, 10) == 1.0);
    vtp::Vec anti(5);
    anti << 0.05, 0.1, 0.15, 0.3, 0.4;
    REQUIRE(vtp::top_k_overlap(anti, truth, 2) == 0.0);
}

TEST_CASE("forward cost formula matches a per-block recount") {
    const vtp::GapConfig cfg;
    const int n = 16;
    const int m = 8;
    const double d = cfg.hidden_dim;
    const double f = cfg.ffn_dim;

    double want = 0.0;
    want += n * d * (cfg.d_p + cfg.d_v);  // semantic mlp first layer
    want += n * d * d;                    // semantic mlp second layer
    want += n * d * 6;                    // spatial projection
    for (int e = 0; e < cfg.encoder_layers; ++e) {
        want += 4 * m * d * d;  // q,k,v,o projections
        want += 2 * m * m * d;  // logits and weighted sum
        want += 2 * m * d * f;  // feed-forward
    }
    for (int l = 0; l < cfg.decoder_layers; ++l) {
        want += 4 * n * d * d + 2 * n * n * d;          // object self-attention
        want += 2 * n * d * d + 2 * m * d * d + 2 * n * m * d;  // cross-attention
        want += 2 * n * d * f;                          // feed-forward
    }
    want += n * d;  // scoring head

    REQUIRE(vtp::gap_forward_flops(cfg, n, m) == Catch::Approx(want).epsilon(1e-12));
}

TEST_CASE("predictor cost is a vanishing fraction of the teacher's visual cost") {
    const vtp::GapConfig cfg;
    vtp::FlopsModel teacher;
    teacher.depth = 16;
    teacher.d_model = 1024;
    teacher.d_ff = 4096;
    teacher.n_objects = 16;
    teacher.text_len = 12;
    const double teacher_cost = vtp::visual_flops(teacher);
    const double gap_cost = vtp::gap_forward_flops(cfg, 16, 8);
    REQUIRE(gap_cost < 0.01 * teacher_cost);
}
