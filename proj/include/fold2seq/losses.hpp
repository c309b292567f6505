#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fold2seq/autodiff.hpp"
#include "fold2seq/model.hpp"

namespace fold2seq::losses {

enum class Stage { Stage1, Stage2, Joint };
std::string to_string(Stage s);

// Eq. 4 weights. l5 is scheduled per epoch (lambda5_schedule); e is the
// schedule offset and k the CS pooling kernel.
struct LossWeights {
    double l1 = 1.0, l2 = 1.0, l3 = 0.02, l4 = 1.0, l5 = 1.0;
    int e = 3;
    int k = 3;
};

// 2^-(epoch - e); exceeds 1 for epoch < e unless clamped.
double lambda5_schedule(int epoch, int e, bool clamp_at_one);

// Joint-mode ablation switches (use_fc drops FC_f and FC_s together).
struct AblationFlags {
    bool use_re_s = true;
    bool use_cs = true;
    bool use_fc = true;
    bool use_cy = true;
};

// Token cross-entropy, mean over non-pad positions.
tc::Var loss_re(tc::Graph& g, tc::Var logits, const std::vector<int>& targets,
                const std::vector<uint8_t>& pad_mask);

// -log p(true fold) under the shared classifier head.
tc::Var loss_fc(model::Binder& b, tc::Var latent, const std::vector<uint8_t>& pad_mask,
                int fold_label);

// Eq. 2 cosine similarity between fold and sequence latents (to be maximized).
// Rows are L2-normalized; Q = h_f h_s^T is average-pooled along the sequence
// axis (kernel k, stride 1, valid), row-wise maxed, then averaged. In [-1, 1].
tc::Var loss_cs(tc::Graph& g, tc::Var h_f, const model::SeqLatent& h_s, int k);

// Eq. 3 squared L2 distance between the native and cyclic sequence latents,
// summed over unpadded positions and dims.
tc::Var loss_cy(tc::Graph& g, const model::SeqLatent& native, const model::SeqLatent& cyclic);

// Teacher-forced cyclic pass: decode the native tokens from `memory`, take the
// per-position argmax x', and re-encode it. Default treats the argmax as
// stop-gradient (x' re-entered as plain tokens); straight_through instead
// feeds the decoder softmax through a hard one-hot into the embedding, so
// gradients reach the decoder.
struct CyclicResult {
    model::SeqLatent latent;
    std::vector<int> tokens;  // x', same length as the native sequence
};
CyclicResult cyclic_latent(model::Binder& b, tc::Var memory,
                           const std::vector<uint8_t>& memory_pad_mask,
                           const std::vector<int>& seq_tokens, bool straight_through);

// Weighted Eq. 4 combination. Stage 1: l2*RE_s + l4*FC_s. Stage 2: l1*RE_f +
// l3*FC_f + l5*(CY - CS). Joint: the full sum. Ablation flags and l5 == 0
// drop terms; a term required by the stage must be present.
struct LossParts {
    std::optional<tc::Var> re_f, re_s, fc_f, fc_s, cs, cy;
};
tc::Var loss_total(tc::Graph& g, const LossParts& parts, const LossWeights& w, Stage stage,
                   const AblationFlags& flags = {});

// One metrics-log line per step: absent values print as nan.
struct StepLog {
    long long step = 0;
    Stage stage = Stage::Stage1;
    double re_f, re_s, fc_f, fc_s, cs, cy, total;
    StepLog();
};
std::string metrics_header();  // step,stage,RE_f,RE_s,FC_f,FC_s,CS,CY,total
std::string format_step_log(const StepLog& row);

}  // namespace fold2seq::losses
