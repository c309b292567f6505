#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fold2seq/common.hpp"
#include "fold2seq/tensor.hpp"

namespace fold2seq::metrics {

struct AlignmentParams {
    double gap_open = 10.0;
    double gap_extend = 0.5;
    void validate() const;  // both penalties strictly positive
};

// BLOSUM62 score for two residues from the 20-letter natural alphabet.
int blosum62(char a, char b);

struct Alignment {
    std::string a, b;  // equal length, '-' marks gaps
    double score = 0.0;
    int matches = 0;
    int length() const { return static_cast<int>(a.size()); }
    double identity() const {
        return a.empty() ? 0.0 : static_cast<double>(matches) / static_cast<double>(a.size());
    }
};

// Global (end gaps penalized) affine-gap optimum: a gap run of length g costs
// open + g * extend. Ties are broken deterministically and symmetrically.
Alignment align(const std::string& a, const std::string& b, const AlignmentParams& p = {});
double align_identity(const std::string& a, const std::string& b, const AlignmentParams& p = {});

// log p(x_k | y_j): teacher-forced sequence log-likelihood of structure k's
// sequence under structure j's fold latent.
class LogLikTable {
public:
    void set(const std::string& j, const std::string& k, double loglik);
    double at(const std::string& j, const std::string& k) const;
    bool empty() const { return t_.empty(); }

private:
    std::map<std::pair<std::string, std::string>, double> t_;
};

// TM(y_g, y_k) for externally predicted structures of generated sequences.
class TmTable {
public:
    void set(const std::string& g, const std::string& k, double tm);
    double at(const std::string& g, const std::string& k) const;
    bool empty() const { return t_.empty(); }

private:
    std::map<std::pair<std::string, std::string>, double> t_;
};
// TSV rows: id_g <tab> id_k <tab> tm_score.
TmTable parse_tm_tsv(const std::string& text);

struct NativeEntry {
    std::string id;
    std::string seq;
};

// Eq. 5: exp(-(1/|S|) sum_j max_k (1/L_k) log p(x_k|y_j)); 1/L_k sits inside
// the max, literally as printed.
double ppl_fold(const std::vector<std::string>& members, const LogLikTable& ll,
                const std::map<std::string, int>& lengths);
// Structure-level: exp(-(1/|D|) sum_j (1/L_j) log p(x_j|y_j)).
double ppl_structure(const std::vector<double>& self_loglik, const std::vector<int>& lengths);

// Eq. 6 (percent): mean over members j, mean over g in G_j, max_k SIM(x_g, x_k).
double sr_fold(const std::vector<NativeEntry>& members,
               const std::map<std::string, std::vector<std::string>>& generated,
               const AlignmentParams& p = {});
double sr_structure(const NativeEntry& native, const std::vector<std::string>& generated,
                    const AlignmentParams& p = {});

// Eq. 7 (fraction): share of members whose best identity against the
// representative's generated set clears the threshold.
double cov_fold(const std::vector<NativeEntry>& members, const std::string& representative,
                const std::vector<std::string>& generated_for_rep, double threshold = 0.30,
                const AlignmentParams& p = {});

// Eq. 8 (fraction): mean over members j, mean over g in G_j, max_k TM(y_g, y_k).
double tr_fold(const std::vector<std::string>& member_ids,
               const std::map<std::string, std::vector<std::string>>& generated_ids,
               const TmTable& tm);
double tr_structure(const std::string& member_id, const std::vector<std::string>& generated_ids,
                    const TmTable& tm);

// Percent: mean over test sequences of max over train sequences of SIM.
double amsi(const std::vector<std::string>& test, const std::vector<std::string>& train,
            const AlignmentParams& p = {});

// Mean-pooled latent artifacts for external visualization.
struct EmbeddingRow {
    std::string id, fold_id;
    std::vector<double> e;
};
EmbeddingRow mean_pool_latent(const std::string& id, const std::string& fold_id,
                              const tc::Tensor& h);
// Mean L2 distance over all unordered same-fold row pairs.
double within_fold_mean_pairwise_l2(const std::vector<EmbeddingRow>& rows);
std::string embedding_tsv(const std::vector<EmbeddingRow>& rows);
void embedding_dump(const std::vector<EmbeddingRow>& rows, const std::string& path);

// Report plumbing: per-fold values with mean and (population) std dev.
struct MetricSummary {
    std::map<std::string, double> per_fold;
    double mean = 0.0;
    double stddev = 0.0;
};
MetricSummary summarize(const std::map<std::string, double>& per_fold);
std::string report_json(const std::map<std::string, MetricSummary>& metrics);

}  // namespace fold2seq::metrics
