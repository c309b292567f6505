#include "fold2seq/losses.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace fold2seq::losses {

using model::Binder;
using model::SeqLatent;
using tc::Graph;
using tc::Tensor;
using tc::Var;

namespace {

// Number of leading unpadded rows; padding must be a trailing block.
int unpadded_length(const SeqLatent& s, int rows, const char* who) {
    if (s.pad_mask.empty()) return rows;
    if (static_cast<int>(s.pad_mask.size()) != rows)
        throw DataError(std::string(who) + ": pad mask size mismatch");
    int n = 0;
    while (n < rows && s.pad_mask[n] == 0) ++n;
    for (int i = n; i < rows; ++i)
        if (s.pad_mask[i] == 0) throw DataError(std::string(who) + ": non-contiguous padding");
    return n;
}

Var unpadded_rows(Graph& g, const SeqLatent& s, const char* who) {
    const int rows = g.value(s.h).rows();
    const int n = unpadded_length(s, rows, who);
    if (n == 0) throw DataError(std::string(who) + ": all positions padded");
    return n == rows ? s.h : g.slice_rows(s.h, 0, n);
}

}  // namespace

std::string to_string(Stage s) {
    switch (s) {
        case Stage::Stage1: return "stage1";
        case Stage::Stage2: return "stage2";
        case Stage::Joint: return "joint";
    }
    throw DataError("unknown stage");
}

double lambda5_schedule(int epoch, int e, bool clamp_at_one) {
    const double v = std::pow(2.0, -static_cast<double>(epoch - e));
    return clamp_at_one ? std::min(1.0, v) : v;
}

Var loss_re(Graph& g, Var logits, const std::vector<int>& targets,
            const std::vector<uint8_t>& pad_mask) {
    const Tensor& t = g.value(logits);
    if (static_cast<int>(targets.size()) != t.rows())
        throw DataError("loss_RE: " + std::to_string(targets.size()) + " targets for " +
                        std::to_string(t.rows()) + " logit rows");
    if (!pad_mask.empty() && pad_mask.size() != targets.size())
        throw DataError("loss_RE: pad mask size mismatch");
    std::vector<int> effective = targets;
    int kept = 0;
    for (size_t i = 0; i < effective.size(); ++i) {
        if (!pad_mask.empty() && pad_mask[i] != 0)
            effective[i] = -1;
        else
            ++kept;
    }
    if (kept == 0) throw DataError("loss_RE: all positions padded");
    return g.cross_entropy(logits, effective, -1);
}

Var loss_fc(Binder& b, Var latent, const std::vector<uint8_t>& pad_mask, int fold_label) {
    const int n_folds = b.params().cfg.n_folds;
    if (fold_label < 0 || fold_label >= n_folds)
        throw DataError("loss_FC: fold label " + std::to_string(fold_label) +
                        " out of range [0, " + std::to_string(n_folds) + ")");
    Var logits = model::classify_logits(b, latent, pad_mask);
    return b.graph().cross_entropy(logits, {fold_label});
}

Var loss_cs(Graph& g, Var h_f, const SeqLatent& h_s, int k) {
    if (k < 1) throw DataError("loss_CS: pooling kernel must be >= 1");
    Var hs = unpadded_rows(g, h_s, "loss_CS");
    if (g.value(hs).rows() < k) throw DataError("loss_CS: sequence shorter than pooling kernel");
    Var q = g.matmul_nt(g.l2_normalize_rows(h_f), g.l2_normalize_rows(hs));  // (125, l_s')
    Var pooled = g.avg_pool_cols(q, k);
    return g.mean_all(g.max_over_axis(pooled, 1));
}

Var loss_cy(Graph& g, const SeqLatent& native, const SeqLatent& cyclic) {
    Var a = unpadded_rows(g, native, "loss_CY");
    Var b = unpadded_rows(g, cyclic, "loss_CY");
    if (g.value(a).rows() != g.value(b).rows())
        throw DataError("loss_CY: unpadded length mismatch (" +
                        std::to_string(g.value(a).rows()) + " vs " +
                        std::to_string(g.value(b).rows()) + ")");
    return g.squared_l2(g.sub(b, a));
}

CyclicResult cyclic_latent(Binder& b, Var memory, const std::vector<uint8_t>& memory_pad_mask,
                           const std::vector<int>& seq_tokens, bool straight_through) {
    Graph& g = b.graph();
    const int l = static_cast<int>(seq_tokens.size());
    if (l == 0) throw DataError("cyclic_latent: empty sequence");
    std::vector<int> prefix;
    prefix.reserve(l + 1);
    prefix.push_back(model::kBos);
    prefix.insert(prefix.end(), seq_tokens.begin(), seq_tokens.end());

    Var logits = model::decode_logits(b, memory, memory_pad_mask, prefix);
    Var head = g.slice_rows(logits, 0, l);  // rows predicting x_0..x_{l-1}

    // Decode is constrained to the native length, so x' must be a pure
    // residue string: PAD/BOS/EOS columns are excluded from the argmax.
    const Tensor& lv = g.value(head);
    std::vector<int> xprime(l);
    for (int r = 0; r < l; ++r) {
        int best = 0;
        for (int c = 1; c < model::kPad; ++c)
            if (lv.at(r, c) > lv.at(r, best)) best = c;
        xprime[r] = best;
    }

    SeqLatent latent;
    if (straight_through) {
        std::vector<uint8_t> specials(static_cast<size_t>(l) * model::kVocab, 0);
        for (int r = 0; r < l; ++r)
            for (int c = model::kPad; c < model::kVocab; ++c)
                specials[static_cast<size_t>(r) * model::kVocab + c] = 1;
        Var residue_head = g.masked_fill(head, specials, -1e30);
        Var one_hot = g.st_hard_one_hot(g.softmax_rows(residue_head));
        latent = model::seq_encode_embedded(b, model::seq_embed_soft(b, one_hot),
                                            std::vector<uint8_t>(l, 0));
    } else {
        latent = model::seq_encode(b, xprime);
    }
    return {latent, xprime};
}

namespace {

void require_part(const std::optional<Var>& part, const char* name) {
    if (!part.has_value())
        throw DataError(std::string("loss_total: missing required part ") + name);
}

void accumulate(Graph& g, std::optional<Var>& total, Var term) {
    total = total.has_value() ? g.add(*total, term) : term;
}

}  // namespace

Var loss_total(Graph& g, const LossParts& parts, const LossWeights& w, Stage stage,
               const AblationFlags& flags) {
    std::optional<Var> total;
    const bool fold_terms = stage == Stage::Stage2 || stage == Stage::Joint;
    const bool seq_terms = stage == Stage::Stage1 || stage == Stage::Joint;

    if (fold_terms) {
        require_part(parts.re_f, "RE_f");
        accumulate(g, total, g.scale(*parts.re_f, w.l1));
        if (flags.use_fc) {
            require_part(parts.fc_f, "FC_f");
            accumulate(g, total, g.scale(*parts.fc_f, w.l3));
        }
    }
    if (seq_terms) {
        if (flags.use_re_s) {
            require_part(parts.re_s, "RE_s");
            accumulate(g, total, g.scale(*parts.re_s, w.l2));
        }
        if (flags.use_fc) {
            require_part(parts.fc_s, "FC_s");
            accumulate(g, total, g.scale(*parts.fc_s, w.l4));
        }
    }
    if (fold_terms && w.l5 != 0.0) {
        const bool cy = flags.use_cy, cs = flags.use_cs;
        if (cy) require_part(parts.cy, "CY");
        if (cs) require_part(parts.cs, "CS");
        if (cy && cs)
            accumulate(g, total, g.scale(g.sub(*parts.cy, *parts.cs), w.l5));
        else if (cy)
            accumulate(g, total, g.scale(*parts.cy, w.l5));
        else if (cs)
            accumulate(g, total, g.scale(*parts.cs, -w.l5));
    }
    if (!total.has_value()) throw DataError("loss_total: no active terms");
    return *total;
}

StepLog::StepLog() {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    re_f = re_s = fc_f = fc_s = cs = cy = total = nan;
}

std::string metrics_header() { return "step,stage,RE_f,RE_s,FC_f,FC_s,CS,CY,total"; }

std::string format_step_log(const StepLog& row) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%lld,%s,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", row.step,
                  to_string(row.stage).c_str(), row.re_f, row.re_s, row.fc_f, row.fc_s, row.cs,
                  row.cy, row.total);
    return buf;
}

}  // namespace fold2seq::losses
