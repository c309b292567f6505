#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fold2seq/model.hpp"
#include "fold2seq/voxel.hpp"

namespace fold2seq::sampler {

struct SampleConfig {
    int k = 5;
    int max_len = 0;  // 0 -> model n_s
    double temperature = 1.0;
    uint64_t seed = 1;
    int num_samples = 1;

    void validate(const model::ModelConfig& mcfg) const;
    int resolved_max_len(const model::ModelConfig& mcfg) const {
        return max_len == 0 ? mcfg.n_s : max_len;
    }
};

// Renormalized top-k candidate distribution for one decoder logits row.
// Eligible tokens are the 20 residues plus EOS; PAD and BOS are never
// candidates. Ties at the k-th score keep the lower token id.
struct StepDistribution {
    std::vector<int> tokens;    // candidate ids, ascending
    std::vector<double> probs;  // renormalized, aligned with tokens
};
StepDistribution top_k_distribution(const std::vector<double>& logits_row, int k,
                                    double temperature);

// Inverse-CDF draw from a step distribution.
int draw_token(const StepDistribution& dist, Rng& rng);

// Optional per-step record for invariant audits.
struct StepTrace {
    std::vector<double> logits_row;
    StepDistribution dist;
    int drawn = 0;
};

// Eval-mode fold latent for a grid, as plain values.
tc::Tensor fold_latent(model::ModelParams& params, const voxel::VoxelGrid& grid);

// One autoregressive sequence from a fold latent: starts after BOS, stops at
// EOS (not emitted) or max_len. Returns residue token ids only.
std::vector<int> sample_tokens(model::ModelParams& params, const tc::Tensor& memory,
                               const SampleConfig& cfg, Rng& rng,
                               std::vector<StepTrace>* trace = nullptr);

// num_samples sequences; sample i draws from Rng(derive_seed(seed, i)) so the
// set is reproducible and samples are order-independent.
std::vector<std::string> sample_set(model::ModelParams& params, const tc::Tensor& memory,
                                    const SampleConfig& cfg);

// FASTA block: one ">structure_id sample_n" header + sequence line per sample.
std::string to_fasta(const std::string& structure_id, const std::vector<std::string>& seqs);

// JSON object mapping condition id -> ["sample_1", ...].
std::string manifest_json(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& sets);

}  // namespace fold2seq::sampler
