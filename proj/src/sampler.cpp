#include "fold2seq/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "fold2seq/autodiff.hpp"

namespace fold2seq::sampler {

using model::kBos;
using model::kEos;
using model::kPad;
using model::kVocab;
using tc::Tensor;

void SampleConfig::validate(const model::ModelConfig& mcfg) const {
    if (k < 1 || k > kVocab)
        throw DataError("sample config: k must be in [1, " + std::to_string(kVocab) + "]");
    if (num_samples < 1) throw DataError("sample config: num_samples must be >= 1");
    if (!(temperature > 0.0)) throw DataError("sample config: temperature must be > 0");
    if (max_len < 0 || max_len > mcfg.n_s)
        throw DataError("sample config: max_len must be in [0, n_s]");
}

StepDistribution top_k_distribution(const std::vector<double>& logits_row, int k,
                                    double temperature) {
    if (logits_row.size() != static_cast<size_t>(kVocab))
        throw DataError("top_k_distribution: expected one logit per vocab entry");
    if (k < 1) throw DataError("top_k_distribution: k must be >= 1");
    if (!(temperature > 0.0)) throw DataError("top_k_distribution: temperature must be > 0");

    // Candidate pool: residues + EOS. Rank by score, ties to the lower id.
    std::vector<int> pool;
    pool.reserve(kPad + 1);
    for (int c = 0; c < kPad; ++c) pool.push_back(c);
    pool.push_back(kEos);
    std::stable_sort(pool.begin(), pool.end(), [&](int a, int b) {
        return logits_row[a] > logits_row[b] || (logits_row[a] == logits_row[b] && a < b);
    });
    pool.resize(std::min<size_t>(pool.size(), static_cast<size_t>(k)));
    std::sort(pool.begin(), pool.end());

    double mx = -std::numeric_limits<double>::infinity();
    for (int c : pool) mx = std::max(mx, logits_row[c] / temperature);
    StepDistribution dist;
    dist.tokens = pool;
    double z = 0.0;
    for (int c : pool) {
        const double e = std::exp(logits_row[c] / temperature - mx);
        dist.probs.push_back(e);
        z += e;
    }
    for (double& p : dist.probs) p /= z;
    return dist;
}

int draw_token(const StepDistribution& dist, Rng& rng) {
    if (dist.tokens.empty()) throw DataError("draw_token: empty distribution");
    const double u = rng.uniform();
    double cum = 0.0;
    for (size_t i = 0; i < dist.tokens.size(); ++i) {
        cum += dist.probs[i];
        if (u < cum) return dist.tokens[i];
    }
    return dist.tokens.back();
}

Tensor fold_latent(model::ModelParams& params, const voxel::VoxelGrid& grid) {
    tc::Graph g;
    model::Binder b(g, params);
    return g.value(model::fold_encode(b, grid, false));
}

std::vector<int> sample_tokens(model::ModelParams& params, const Tensor& memory,
                               const SampleConfig& cfg, Rng& rng,
                               std::vector<StepTrace>* trace) {
    cfg.validate(params.cfg);
    const int max_len = cfg.resolved_max_len(params.cfg);

    std::vector<int> prefix = {kBos};
    std::vector<int> out;
    for (int step = 0; step < max_len; ++step) {
        tc::Graph g;
        model::Binder b(g, params);
        const Tensor logits = g.value(model::decode_logits(b, g.constant(memory), {}, prefix));
        const int r = static_cast<int>(prefix.size()) - 1;
        std::vector<double> row(kVocab);
        for (int c = 0; c < kVocab; ++c) row[c] = logits.at(r, c);

        const StepDistribution dist = top_k_distribution(row, cfg.k, cfg.temperature);
        const int tok = draw_token(dist, rng);
        if (trace != nullptr) trace->push_back({row, dist, tok});
        if (tok == kEos) break;
        out.push_back(tok);
        prefix.push_back(tok);
    }
    return out;
}

std::vector<std::string> sample_set(model::ModelParams& params, const Tensor& memory,
                                    const SampleConfig& cfg) {
    cfg.validate(params.cfg);
    std::vector<std::string> out;
    out.reserve(cfg.num_samples);
    for (int i = 0; i < cfg.num_samples; ++i) {
        Rng rng(derive_seed(cfg.seed, static_cast<uint64_t>(i)));
        out.push_back(model::decode_tokens(sample_tokens(params, memory, cfg, rng)));
    }
    return out;
}

std::string to_fasta(const std::string& structure_id, const std::vector<std::string>& seqs) {
    std::string out;
    for (size_t i = 0; i < seqs.size(); ++i) {
        out += ">" + structure_id + " sample_" + std::to_string(i + 1) + "\n";
        out += seqs[i] + "\n";
    }
    return out;
}

std::string manifest_json(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& sets) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [id, seqs] : sets) {
        nlohmann::json ids = nlohmann::json::array();
        for (size_t i = 0; i < seqs.size(); ++i) ids.push_back("sample_" + std::to_string(i + 1));
        j[id] = ids;
    }
    return j.dump(2);
}

}  // namespace fold2seq::sampler
