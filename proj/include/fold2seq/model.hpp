#pragma once

#include <map>
#include <string>
#include <vector>

#include "fold2seq/autodiff.hpp"
#include "fold2seq/common.hpp"
#include "fold2seq/params.hpp"
#include "fold2seq/voxel.hpp"

namespace fold2seq::model {

// Token ids: the 20 amino acids in kAminoAlphabet order, then the specials.
constexpr int kPad = 20;
constexpr int kBos = 21;
constexpr int kEos = 22;
constexpr int kVocab = 23;

std::vector<int> encode_sequence(const std::string& seq);  // throws on non-natural letters
std::string decode_tokens(const std::vector<int>& tokens); // specials rendered as '#'

struct ModelConfig {
    int d = 32;        // latent width; PE's h
    int n_layers = 2;  // per transformer block (encoder and decoder alike)
    int n_heads = 4;
    int n_s = 200;     // max sequence length
    int n_folds = 2;
    int d_ff() const { return 4 * d; }
    static constexpr int l_f = 125;  // 5*5*5 after the conv schedule

    // d divisible by 4 (channel schedule starts at d/4) and by n_heads; the
    // fixed stride schedule maps 20^3 -> 5^3.
    void validate() const;

    std::string to_json_string() const;
    static ModelConfig from_json_string(const std::string& s);
};

// One model = config + every named tensor (weights + batch-norm statistics).
struct ModelParams {
    ModelConfig cfg;
    tc::ParamStore store;

    static ModelParams init(const ModelConfig& cfg, Rng& rng);
};

// Appendix-style sinusoidal encodings.
double positional_encoding_3d(int x, int y, int z, int dim, int h);  // in [-3, 3]
double positional_encoding_1d(int pos, int dim, int d);              // in [-1, 1]
tc::Tensor pe3d_table(int d);            // (125, d), row p = (x*25 + y*5 + z)
tc::Tensor pe1d_table(int len, int d);   // (len, d)

// Binds named parameters into a graph, one node per name.
class Binder {
public:
    Binder(tc::Graph& g, ModelParams& params) : g_(g), params_(params) {}
    tc::Var operator()(const std::string& name);
    tc::Graph& graph() { return g_; }
    ModelParams& params() { return params_; }

private:
    tc::Graph& g_;
    ModelParams& params_;
    std::map<std::string, tc::Var> cache_;
};

struct SeqLatent {
    tc::Var h;                      // (l_s, d)
    std::vector<uint8_t> pad_mask;  // 1 = PAD position, excluded from pooling/attention keys
};

// 6 residual conv blocks -> 3D PE -> transformer encoder -> (125, d).
// training=true uses batch statistics and updates the running ones.
tc::Var fold_encode(Binder& b, const voxel::VoxelGrid& grid, bool training);

SeqLatent seq_encode(Binder& b, const std::vector<int>& tokens);
// Same encoder over an externally built embedding matrix (straight-through
// cycle path). `embedded` must already include the sqrt(d) scale and 1D PE.
SeqLatent seq_encode_embedded(Binder& b, tc::Var embedded, std::vector<uint8_t> pad_mask);
// Embeds tokens with the sequence encoder's table (scale + PE applied).
tc::Var seq_embed_tokens(Binder& b, const std::vector<int>& tokens);
tc::Var seq_embed_soft(Binder& b, tc::Var one_hot_rows);  // (l, vocab) @ table

// Teacher-forced decoder: causal self-attention over the prefix (BOS-first),
// cross-attention to memory; returns (prefix_len, vocab) logits.
tc::Var decode_logits(Binder& b, tc::Var memory, const std::vector<uint8_t>& memory_pad_mask,
                      const std::vector<int>& prefix);

// Mean-pool (pad-aware) -> shared 2-layer MLP; logits over n_folds.
tc::Var classify_logits(Binder& b, tc::Var latent, const std::vector<uint8_t>& pad_mask);
// Softmax of the above, as plain numbers.
std::vector<double> classify_fold(ModelParams& params, const tc::Tensor& latent,
                                  const std::vector<uint8_t>& pad_mask);

// Teacher-forced log p(tokens | memory): sum of log-softmax probabilities
// over the residue positions only (no EOS term), so a uniform-over-residues
// decoder scores exactly L * ln(1/20).
double sequence_loglik(ModelParams& params, const tc::Tensor& memory,
                       const std::vector<int>& tokens);

// Names of all sequence-encoder parameters (the stage-2 freeze set).
std::vector<std::string> sequence_encoder_param_names(const ModelConfig& cfg);

}  // namespace fold2seq::model
