#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "fold2seq/model.hpp"
#include "fold2seq/params.hpp"

#include "helpers.hpp"

using namespace fold2seq;
using model::Binder;
using model::ModelConfig;
using model::ModelParams;
using tc::Graph;
using tc::Tensor;
using tc::Var;

namespace {

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.n_s = 200;
    cfg.n_folds = 3;
    return cfg;
}

voxel::VoxelGrid random_grid(uint64_t seed) {
    voxel::VoxelGrid g;
    Rng rng(seed);
    for (double& v : g.data) v = rng.uniform() * 0.5;
    return g;
}

Tensor random_tensor(std::vector<int> shape, uint64_t seed) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (double& v : t.v) v = rng.normal();
    return t;
}

Tensor eval_fold_encode(ModelParams& params, const voxel::VoxelGrid& grid) {
    Graph g;
    Binder b(g, params);
    return g.value(model::fold_encode(b, grid, false));
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("3D positional encoding anchors and bounds") {
    // At the origin every even dim is sin(0)*3 = 0 and every odd dim cos(0)*3 = 3.
    for (int dim = 0; dim < 16; ++dim) {
        const double v = model::positional_encoding_3d(0, 0, 0, dim, 16);
        CHECK(v == (dim % 2 == 0 ? 0.0 : 3.0));
    }
    CHECK(model::positional_encoding_3d(1, 2, 3, 0, 4) ==
          doctest::Approx(1.8918884196934454).epsilon(1e-12));
    const Tensor t = model::pe3d_table(8);
    REQUIRE(t.shape == std::vector<int>{125, 8});
    for (double v : t.v) {
        CHECK(v >= -3.0);
        CHECK(v <= 3.0);
    }
}

TEST_CASE("1D positional encoding stays in [-1, 1]") {
    const Tensor t = model::pe1d_table(200, 8);
    REQUIRE(t.shape == std::vector<int>{200, 8});
    for (double v : t.v) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK(t.at(0, 0) == 0.0);
    CHECK(t.at(0, 1) == 1.0);
    CHECK(t.at(3, 0) == doctest::Approx(std::sin(3.0)).epsilon(1e-12));
}

TEST_CASE("config validation rejects bad shapes") {
    ModelConfig cfg = toy_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.d = 30;  // not a multiple of 4
    CHECK_THROWS_AS(cfg.validate(), DataError);
    cfg = toy_config();
    cfg.n_heads = 3;  // does not divide d = 8
    CHECK_THROWS_AS(cfg.validate(), DataError);
    cfg = toy_config();
    cfg.n_layers = 0;
    CHECK_THROWS_AS(cfg.validate(), DataError);
    cfg = toy_config();
    cfg.n_folds = 0;
    CHECK_THROWS_AS(cfg.validate(), DataError);
}

TEST_CASE("config JSON round trip") {
    const ModelConfig cfg = toy_config();
    const ModelConfig back = ModelConfig::from_json_string(cfg.to_json_string());
    CHECK(back.d == cfg.d);
    CHECK(back.n_layers == cfg.n_layers);
    CHECK(back.n_heads == cfg.n_heads);
    CHECK(back.n_s == cfg.n_s);
    CHECK(back.n_folds == cfg.n_folds);
    CHECK_THROWS_AS(ModelConfig::from_json_string("{\"d\": 8}"), DataError);
}

TEST_CASE("token encode and decode round trip") {
    const std::vector<int> ids = model::encode_sequence("ACDWY");
    CHECK(ids == std::vector<int>{0, 1, 2, 18, 19});
    CHECK(model::decode_tokens(ids) == "ACDWY");
    CHECK(model::decode_tokens({model::kPad, model::kBos, model::kEos}) == "###");
    CHECK_THROWS_AS(model::encode_sequence("ACX"), DataError);
    CHECK_THROWS_AS(model::decode_tokens({0, 23}), DataError);
}

TEST_CASE("seeded init is deterministic") {
    const ModelConfig cfg = toy_config();
    Rng r1(11), r2(11), r3(12);
    ModelParams a = ModelParams::init(cfg, r1);
    ModelParams b = ModelParams::init(cfg, r2);
    ModelParams c = ModelParams::init(cfg, r3);
    auto pa = a.store.all(), pb = b.store.all(), pc = c.store.all();
    REQUIRE(pa.size() == pb.size());
    bool any_diff_seed_diff = false;
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->name == pb[i]->name);
        CHECK(pa[i]->value.v == pb[i]->value.v);
        if (pa[i]->value.v != pc[i]->value.v) any_diff_seed_diff = true;
    }
    CHECK(any_diff_seed_diff);
}

TEST_CASE("fold_encode shape and eval-mode determinism") {
    const ModelConfig cfg = toy_config();
    Rng rng(5);
    ModelParams params = ModelParams::init(cfg, rng);
    const voxel::VoxelGrid grid = random_grid(99);

    const Tensor h1 = eval_fold_encode(params, grid);
    const Tensor h2 = eval_fold_encode(params, grid);
    REQUIRE(h1.shape == std::vector<int>{125, cfg.d});
    CHECK(h1.v == h2.v);  // bit-identical

    // All-zero grid: a deterministic function of biases, also bit-identical.
    const voxel::VoxelGrid zero;
    const Tensor z1 = eval_fold_encode(params, zero);
    const Tensor z2 = eval_fold_encode(params, zero);
    CHECK(z1.v == z2.v);

    // Training mode must update batch-norm running statistics; eval must not.
    const Tensor rm_before = params.store.at("fold_enc.block1.bn1.running_mean").value;
    {
        Graph g;
        Binder b(g, params);
        model::fold_encode(b, grid, true);
    }
    const Tensor& rm_after = params.store.at("fold_enc.block1.bn1.running_mean").value;
    CHECK(rm_before.v != rm_after.v);
}

TEST_CASE("channel permutation with permuted first-layer weights is an identity") {
    const ModelConfig cfg = toy_config();
    Rng r1(21), r2(21);
    ModelParams params = ModelParams::init(cfg, r1);
    ModelParams permuted = ModelParams::init(cfg, r2);

    const int perm[4] = {2, 0, 3, 1};  // new channel c reads old channel perm[c]
    const voxel::VoxelGrid grid = random_grid(31);
    voxel::VoxelGrid grid_p;
    for (int x = 0; x < voxel::kGridN; ++x)
        for (int y = 0; y < voxel::kGridN; ++y)
            for (int z = 0; z < voxel::kGridN; ++z)
                for (int c = 0; c < voxel::kChannels; ++c)
                    grid_p.at(x, y, z, c) = grid.at(x, y, z, perm[c]);

    Tensor& w1 = permuted.store.at("fold_enc.block1.conv1.w").value;
    const Tensor w1_orig = params.store.at("fold_enc.block1.conv1.w").value;
    for (int co = 0; co < w1.rows(); ++co)
        for (int c = 0; c < 4; ++c)
            for (int k = 0; k < 27; ++k) w1.at(co, c * 27 + k) = w1_orig.at(co, perm[c] * 27 + k);
    Tensor& wp = permuted.store.at("fold_enc.block1.proj.w").value;
    const Tensor wp_orig = params.store.at("fold_enc.block1.proj.w").value;
    for (int co = 0; co < wp.rows(); ++co)
        for (int c = 0; c < 4; ++c) wp.at(co, c) = wp_orig.at(co, perm[c]);

    const Tensor h = eval_fold_encode(params, grid);
    const Tensor hp = eval_fold_encode(permuted, grid_p);
    REQUIRE(h.shape == hp.shape);
    double max_err = 0.0;
    for (size_t i = 0; i < h.v.size(); ++i) max_err = std::max(max_err, std::abs(h.v[i] - hp.v[i]));
    CHECK(max_err < 1e-6);
}

TEST_CASE("sequence padding does not change unpadded rows") {
    const ModelConfig cfg = toy_config();
    Rng rng(17);
    ModelParams params = ModelParams::init(cfg, rng);
    std::vector<int> tokens;
    for (int i = 0; i < 10; ++i) tokens.push_back(static_cast<int>(rng.below(20)));
    std::vector<int> padded = tokens;
    padded.resize(200, model::kPad);

    Graph g1;
    Binder b1(g1, params);
    const model::SeqLatent lat = model::seq_encode(b1, tokens);
    Graph g2;
    Binder b2(g2, params);
    const model::SeqLatent lat_p = model::seq_encode(b2, padded);

    const Tensor &h = g1.value(lat.h), &hp = g2.value(lat_p.h);
    REQUIRE(h.shape == std::vector<int>{10, cfg.d});
    REQUIRE(hp.shape == std::vector<int>{200, cfg.d});
    double max_err = 0.0;
    for (int r = 0; r < 10; ++r)
        for (int c = 0; c < cfg.d; ++c) max_err = std::max(max_err, std::abs(h.at(r, c) - hp.at(r, c)));
    CHECK(max_err < 1e-6);

    // Pad-aware classification matches the unpadded latent too.
    const std::vector<double> p1 = model::classify_fold(params, h, lat.pad_mask);
    const std::vector<double> p2 = model::classify_fold(params, hp, lat_p.pad_mask);
    REQUIRE(p1.size() == p2.size());
    for (size_t i = 0; i < p1.size(); ++i) CHECK(std::abs(p1[i] - p2[i]) < 1e-6);
}

TEST_CASE("sequence encoder rejects bad input") {
    const ModelConfig cfg = toy_config();
    Rng rng(3);
    ModelParams params = ModelParams::init(cfg, rng);
    Graph g;
    Binder b(g, params);
    CHECK_THROWS_AS(model::seq_encode(b, {}), DataError);
    CHECK_THROWS_AS(model::seq_encode(b, {0, 23, 1}), DataError);
    CHECK_THROWS_AS(model::seq_encode(b, {0, -1}), DataError);
    std::vector<int> too_long(cfg.n_s + 1, 0);
    CHECK_THROWS_AS(model::seq_encode(b, too_long), DataError);
}

TEST_CASE("decoder causality: changing target t only alters logits past t") {
    const ModelConfig cfg = toy_config();
    Rng rng(29);
    ModelParams params = ModelParams::init(cfg, rng);
    const Tensor mem = random_tensor({ModelConfig::l_f, cfg.d}, 41);

    // Target x_t sits at prefix slot t+1 (after BOS); logits row t predicts x_t.
    const std::vector<int> prefix1 = {model::kBos, 3, 7, 11, 2, 19};
    std::vector<int> prefix2 = prefix1;
    const int t = 2;
    prefix2[t + 1] = 5;  // change target token x_2

    Graph g1;
    Binder b1(g1, params);
    const Tensor l1 = g1.value(model::decode_logits(b1, g1.constant(mem), {}, prefix1));
    Graph g2;
    Binder b2(g2, params);
    const Tensor l2 = g2.value(model::decode_logits(b2, g2.constant(mem), {}, prefix2));

    REQUIRE(l1.shape == std::vector<int>{6, model::kVocab});
    for (int r = 0; r <= t; ++r)
        for (int c = 0; c < model::kVocab; ++c) REQUIRE(l1.at(r, c) == l2.at(r, c));
    bool later_differs = false;
    for (int r = t + 1; r < 6; ++r)
        for (int c = 0; c < model::kVocab; ++c) later_differs = later_differs || l1.at(r, c) != l2.at(r, c);
    CHECK(later_differs);
}

TEST_CASE("decoder validates prefix and memory mask") {
    const ModelConfig cfg = toy_config();
    Rng rng(15);
    ModelParams params = ModelParams::init(cfg, rng);
    Graph g;
    Binder b(g, params);
    Var mem = g.constant(random_tensor({ModelConfig::l_f, cfg.d}, 1));
    CHECK_THROWS_AS(model::decode_logits(b, mem, {}, {}), DataError);
    CHECK_THROWS_AS(model::decode_logits(b, mem, {}, {0, 99}), DataError);
    CHECK_THROWS_AS(model::decode_logits(b, mem, std::vector<uint8_t>(3, 0), {model::kBos, 0}),
                    DataError);
}

TEST_CASE("classifier yields a probability row from one shared head") {
    const ModelConfig cfg = toy_config();
    Rng rng(53);
    ModelParams params = ModelParams::init(cfg, rng);

    // One head: exactly these four classifier tensors exist, used for every latent kind.
    int cls_count = 0;
    for (const auto* p : params.store.all())
        if (p->name.rfind("cls.", 0) == 0) ++cls_count;
    CHECK(cls_count == 4);

    const Tensor fold_latent = random_tensor({ModelConfig::l_f, cfg.d}, 7);
    const Tensor seq_latent = random_tensor({12, cfg.d}, 8);
    for (const Tensor& latent : {fold_latent, seq_latent}) {
        const std::vector<double> p = model::classify_fold(params, latent, {});
        REQUIRE(p.size() == static_cast<size_t>(cfg.n_folds));
        double sum = 0.0;
        for (double x : p) {
            CHECK(x >= 0.0);
            sum += x;
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }

    // Perturbing the shared head moves both classifications.
    const std::vector<double> before_f = model::classify_fold(params, fold_latent, {});
    const std::vector<double> before_s = model::classify_fold(params, seq_latent, {});
    params.store.at("cls.b2").value.at(0, 0) += 0.5;
    CHECK(model::classify_fold(params, fold_latent, {}) != before_f);
    CHECK(model::classify_fold(params, seq_latent, {}) != before_s);

    CHECK_THROWS_AS(model::classify_fold(params, seq_latent, std::vector<uint8_t>(12, 1)),
                    DataError);
}

TEST_CASE("sequence-encoder freeze set is exactly the seq_enc parameters") {
    const ModelConfig cfg = toy_config();
    Rng rng(2);
    ModelParams params = ModelParams::init(cfg, rng);
    const std::vector<std::string> names = model::sequence_encoder_param_names(cfg);
    CHECK(names.size() == 1 + 16 * static_cast<size_t>(cfg.n_layers));
    std::set<std::string> listed(names.begin(), names.end());
    REQUIRE(listed.size() == names.size());
    for (const std::string& n : names) CHECK(params.store.has(n));
    for (const auto* p : params.store.all())
        if (p->name.rfind("seq_enc.", 0) == 0) CHECK(listed.count(p->name) == 1);
}

TEST_CASE("checkpoint round trip preserves model outputs") {
    const ModelConfig cfg = toy_config();
    Rng r1(61), r2(62);
    ModelParams params = ModelParams::init(cfg, r1);
    const voxel::VoxelGrid grid = random_grid(77);
    const Tensor h = eval_fold_encode(params, grid);

    const std::string path = "model_ckpt_test.f2sckpt";
    tc::save_checkpoint(path, params.store, {{"model_config", cfg.to_json_string()}});

    ModelParams restored = ModelParams::init(cfg, r2);  // different seed, then overwritten
    const auto meta = tc::load_checkpoint(path, restored.store);
    REQUIRE(meta.count("model_config") == 1);
    const ModelConfig cfg_back = ModelConfig::from_json_string(meta.at("model_config"));
    CHECK(cfg_back.d == cfg.d);

    const Tensor h2 = eval_fold_encode(restored, grid);
    CHECK(h.v == h2.v);  // bit-identical
    std::remove(path.c_str());
}

}  // TEST_SUITE("model")
