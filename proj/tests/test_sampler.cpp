#include <doctest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fold2seq/sampler.hpp"

using namespace fold2seq;
using model::ModelConfig;
using model::ModelParams;
using sampler::SampleConfig;
using sampler::StepDistribution;
using tc::Tensor;

namespace {

ModelConfig toy_model_config() {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.n_s = 16;
    cfg.n_folds = 2;
    return cfg;
}

std::vector<double> uniform_logits(double fill = 0.0) {
    return std::vector<double>(model::kVocab, fill);
}

Tensor random_memory(uint64_t seed, int d) {
    Tensor t({ModelConfig::l_f, d});
    Rng rng(seed);
    for (double& v : t.v) v = rng.normal();
    return t;
}

// Reference top-k: brute-force the k best eligible ids (residues + EOS) by
// (score desc, id asc) without the library's sort machinery.
std::set<int> brute_force_top_k(const std::vector<double>& row, int k) {
    std::vector<int> pool;
    for (int c = 0; c < model::kPad; ++c) pool.push_back(c);
    pool.push_back(model::kEos);
    std::set<int> picked;
    while (static_cast<int>(picked.size()) < k && picked.size() < pool.size()) {
        int best = -1;
        for (int c : pool) {
            if (picked.count(c)) continue;
            if (best == -1 || row[c] > row[best]) best = c;
        }
        picked.insert(best);
    }
    return picked;
}

}  // namespace

TEST_SUITE("sampler") {

TEST_CASE("config validation enforces the documented ranges") {
    const ModelConfig mcfg = toy_model_config();
    SampleConfig cfg;
    CHECK_NOTHROW(cfg.validate(mcfg));
    CHECK(cfg.resolved_max_len(mcfg) == 16);

    SampleConfig bad = cfg;
    bad.k = 0;
    CHECK_THROWS_AS(bad.validate(mcfg), DataError);
    bad = cfg;
    bad.k = model::kVocab + 1;
    CHECK_THROWS_AS(bad.validate(mcfg), DataError);
    bad = cfg;
    bad.k = model::kVocab;
    CHECK_NOTHROW(bad.validate(mcfg));
    bad = cfg;
    bad.num_samples = 0;
    CHECK_THROWS_AS(bad.validate(mcfg), DataError);
    bad = cfg;
    bad.temperature = 0.0;
    CHECK_THROWS_AS(bad.validate(mcfg), DataError);
    bad = cfg;
    bad.max_len = mcfg.n_s + 1;
    CHECK_THROWS_AS(bad.validate(mcfg), DataError);
    bad = cfg;
    bad.max_len = 4;
    CHECK(bad.resolved_max_len(mcfg) == 4);
}

TEST_CASE("top-k candidates exclude PAD and BOS and keep EOS rankable") {
    // Huge scores on PAD and BOS must not put them in any candidate set.
    std::vector<double> row = uniform_logits(-5.0);
    row[model::kPad] = 100.0;
    row[model::kBos] = 100.0;
    row[3] = 2.0;
    row[model::kEos] = 1.0;

    const StepDistribution d2 = sampler::top_k_distribution(row, 2, 1.0);
    CHECK(d2.tokens == std::vector<int>{3, model::kEos});

    // k beyond the eligible pool clamps to residues + EOS = 21 candidates.
    const StepDistribution dall = sampler::top_k_distribution(row, model::kVocab, 1.0);
    REQUIRE(dall.tokens.size() == 21);
    for (int t : dall.tokens) {
        CHECK(t != model::kPad);
        CHECK(t != model::kBos);
    }
    CHECK(dall.tokens.back() == model::kEos);

    double sum = 0.0;
    for (double p : dall.probs) sum += p;
    CHECK(std::abs(sum - 1.0) < 1e-12);

    // Renormalized probabilities match a direct masked softmax.
    double z = 0.0;
    for (int t : dall.tokens) z += std::exp(row[t]);
    for (size_t i = 0; i < dall.tokens.size(); ++i)
        CHECK(std::abs(dall.probs[i] - std::exp(row[dall.tokens[i]]) / z) < 1e-12);
}

TEST_CASE("ties at the k-th score keep the lower token id") {
    std::vector<double> row = uniform_logits(-10.0);
    row[0] = 5.0;
    row[3] = 3.0;
    row[7] = 3.0;  // exact tie with id 3; k=2 must keep id 3
    const StepDistribution d = sampler::top_k_distribution(row, 2, 1.0);
    CHECK(d.tokens == std::vector<int>{0, 3});

    // With k=3 the tie partner joins.
    const StepDistribution d3 = sampler::top_k_distribution(row, 3, 1.0);
    CHECK(d3.tokens == std::vector<int>{0, 3, 7});
}

TEST_CASE("temperature rescales probabilities without changing the cut") {
    std::vector<double> row = uniform_logits(-3.0);
    row[2] = 1.0;
    row[5] = 0.5;
    const StepDistribution cold = sampler::top_k_distribution(row, 2, 0.25);
    const StepDistribution hot = sampler::top_k_distribution(row, 2, 4.0);
    CHECK(cold.tokens == hot.tokens);
    CHECK(cold.probs[0] > hot.probs[0]);  // low temperature sharpens
    CHECK(std::abs(cold.probs[0] - 1.0 / (1.0 + std::exp(-0.5 / 0.25))) < 1e-12);
}

TEST_CASE("draws stay inside the top-k set over many random rows") {
    Rng rng(404);
    int checked = 0;
    for (int trial = 0; trial < 2500; ++trial) {
        std::vector<double> row(model::kVocab);
        for (double& v : row) v = rng.normal() * 2.0;
        const int k = 1 + static_cast<int>(rng.below(8));
        const StepDistribution d = sampler::top_k_distribution(row, k, 1.0);
        const std::set<int> expect = brute_force_top_k(row, k);
        REQUIRE(d.tokens.size() == expect.size());
        for (int t : d.tokens) CHECK(expect.count(t) == 1);
        for (int rep = 0; rep < 4; ++rep) {
            const int tok = sampler::draw_token(d, rng);
            CHECK(expect.count(tok) == 1);
            CHECK(tok != model::kPad);
            CHECK(tok != model::kBos);
            ++checked;
        }
    }
    CHECK(checked == 10000);
}

TEST_CASE("k=1 equals greedy decoding") {
    const ModelConfig mcfg = toy_model_config();
    Rng rng(71);
    ModelParams params = ModelParams::init(mcfg, rng);
    const Tensor memory = random_memory(72, mcfg.d);

    SampleConfig cfg;
    cfg.k = 1;
    cfg.seed = 9;
    Rng draw_rng(cfg.seed);
    const std::vector<int> sampled = sampler::sample_tokens(params, memory, cfg, draw_rng);

    // Independent greedy loop: argmax over residues + EOS at every step.
    std::vector<int> greedy;
    std::vector<int> prefix = {model::kBos};
    for (int step = 0; step < mcfg.n_s; ++step) {
        tc::Graph g;
        model::Binder b(g, params);
        const Tensor logits = g.value(model::decode_logits(b, g.constant(memory), {}, prefix));
        const int r = static_cast<int>(prefix.size()) - 1;
        int best = 0;
        for (int c = 1; c < model::kVocab; ++c) {
            if (c == model::kPad || c == model::kBos) continue;
            if (logits.at(r, c) > logits.at(r, best)) best = c;
        }
        if (best == model::kEos) break;
        greedy.push_back(best);
        prefix.push_back(best);
    }
    CHECK(sampled == greedy);

    // Any seed gives the same k=1 result: the distribution is a point mass.
    Rng other_rng(12345);
    CHECK(sampler::sample_tokens(params, memory, cfg, other_rng) == sampled);
}

TEST_CASE("chi-squared fit of full-distribution draws within 3 sigma") {
    // A realistic logits row from a random decoder step.
    const ModelConfig mcfg = toy_model_config();
    Rng rng(81);
    ModelParams params = ModelParams::init(mcfg, rng);
    const Tensor memory = random_memory(82, mcfg.d);
    tc::Graph g;
    model::Binder b(g, params);
    const Tensor logits =
        g.value(model::decode_logits(b, g.constant(memory), {}, {model::kBos}));
    std::vector<double> row(model::kVocab);
    for (int c = 0; c < model::kVocab; ++c) row[c] = logits.at(0, c);

    const StepDistribution d = sampler::top_k_distribution(row, model::kVocab, 1.0);
    REQUIRE(d.tokens.size() == 21);

    const int n = 10000;
    std::vector<int> counts(d.tokens.size(), 0);
    Rng draw_rng(5150);
    for (int i = 0; i < n; ++i) {
        const int tok = sampler::draw_token(d, draw_rng);
        const auto it = std::find(d.tokens.begin(), d.tokens.end(), tok);
        REQUIRE(it != d.tokens.end());
        counts[static_cast<size_t>(it - d.tokens.begin())]++;
    }

    double chi2 = 0.0;
    for (size_t i = 0; i < counts.size(); ++i) {
        const double expected = d.probs[i] * n;
        REQUIRE(expected > 5.0);  // keep the chi-squared approximation honest
        const double diff = counts[i] - expected;
        chi2 += diff * diff / expected;
    }
    // dof = 20: mean 20, sd sqrt(40).
    CHECK(chi2 < 20.0 + 3.0 * std::sqrt(40.0));
}

TEST_CASE("sample sets are seed-deterministic and free of special tokens") {
    const ModelConfig mcfg = toy_model_config();
    Rng rng(91);
    ModelParams params = ModelParams::init(mcfg, rng);
    const Tensor memory = random_memory(92, mcfg.d);

    SampleConfig cfg;
    cfg.k = 5;
    cfg.seed = 77;
    cfg.num_samples = 6;
    const auto set1 = sampler::sample_set(params, memory, cfg);
    const auto set2 = sampler::sample_set(params, memory, cfg);
    REQUIRE(set1.size() == 6);
    CHECK(set1 == set2);

    SampleConfig other = cfg;
    other.seed = 78;
    CHECK(sampler::sample_set(params, memory, other) != set1);

    const std::string aa = io::kAminoAlphabet;
    for (const auto& s : set1) {
        CHECK(s.size() <= static_cast<size_t>(mcfg.n_s));
        for (char c : s) CHECK(aa.find(c) != std::string::npos);
    }
}

TEST_CASE("EOS bias controls termination against the max_len cap") {
    const ModelConfig mcfg = toy_model_config();
    Rng rng(101);
    ModelParams params = ModelParams::init(mcfg, rng);
    const Tensor memory = random_memory(102, mcfg.d);
    SampleConfig cfg;
    cfg.k = 5;
    cfg.seed = 11;

    // EOS pushed far down: every sequence runs to exactly max_len.
    params.store.at("dec.out.b").value.at(0, model::kEos) = -50.0;
    Rng r1(cfg.seed);
    CHECK(sampler::sample_tokens(params, memory, cfg, r1).size() ==
          static_cast<size_t>(mcfg.n_s));

    // EOS dominant: immediate termination, empty sequence.
    params.store.at("dec.out.b").value.at(0, model::kEos) = 50.0;
    Rng r2(cfg.seed);
    CHECK(sampler::sample_tokens(params, memory, cfg, r2).empty());
}

TEST_CASE("fasta and manifest formats are exact") {
    const std::string fasta = sampler::to_fasta("alpha1", {"ACD", "WYV"});
    CHECK(fasta == ">alpha1 sample_1\nACD\n>alpha1 sample_2\nWYV\n");

    const std::string manifest =
        sampler::manifest_json({{"alpha1", {"ACD", "WYV"}}, {"beta2", {"KL"}}});
    const auto j = nlohmann::json::parse(manifest);
    REQUIRE(j.is_object());
    CHECK(j.at("alpha1") == nlohmann::json({"sample_1", "sample_2"}));
    CHECK(j.at("beta2") == nlohmann::json({"sample_1"}));
}

}  // TEST_SUITE("sampler")
