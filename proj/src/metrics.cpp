#include "fold2seq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace fold2seq::metrics {

namespace {

constexpr const char* kNcbiOrder = "ARNDCQEGHILKMFPSTWYV";

// NCBI BLOSUM62, rows/cols in kNcbiOrder.
constexpr int kBlosum62[20][20] = {
    /*A*/ {4, -1, -2, -2, 0, -1, -1, 0, -2, -1, -1, -1, -1, -2, -1, 1, 0, -3, -2, 0},
    /*R*/ {-1, 5, 0, -2, -3, 1, 0, -2, 0, -3, -2, 2, -1, -3, -2, -1, -1, -3, -2, -3},
    /*N*/ {-2, 0, 6, 1, -3, 0, 0, 0, 1, -3, -3, 0, -2, -3, -2, 1, 0, -4, -2, -3},
    /*D*/ {-2, -2, 1, 6, -3, 0, 2, -1, -1, -3, -4, -1, -3, -3, -1, 0, -1, -4, -3, -3},
    /*C*/ {0, -3, -3, -3, 9, -3, -4, -3, -3, -1, -1, -3, -1, -2, -3, -1, -1, -2, -2, -1},
    /*Q*/ {-1, 1, 0, 0, -3, 5, 2, -2, 0, -3, -2, 1, 0, -3, -1, 0, -1, -2, -1, -2},
    /*E*/ {-1, 0, 0, 2, -4, 2, 5, -2, 0, -3, -3, 1, -2, -3, -1, 0, -1, -3, -2, -2},
    /*G*/ {0, -2, 0, -1, -3, -2, -2, 6, -2, -4, -4, -2, -3, -3, -2, 0, -2, -2, -3, -3},
    /*H*/ {-2, 0, 1, -1, -3, 0, 0, -2, 8, -3, -3, -1, -2, -1, -2, -1, -2, -2, 2, -3},
    /*I*/ {-1, -3, -3, -3, -1, -3, -3, -4, -3, 4, 2, -3, 1, 0, -3, -2, -1, -3, -1, 3},
    /*L*/ {-1, -2, -3, -4, -1, -2, -3, -4, -3, 2, 4, -2, 2, 0, -3, -2, -1, -2, -1, 1},
    /*K*/ {-1, 2, 0, -1, -3, 1, 1, -2, -1, -3, -2, 5, -1, -3, -1, 0, -1, -3, -2, -2},
    /*M*/ {-1, -1, -2, -3, -1, 0, -2, -3, -2, 1, 2, -1, 5, 0, -2, -1, -1, -1, -1, 1},
    /*F*/ {-2, -3, -3, -3, -2, -3, -3, -3, -1, 0, 0, -3, 0, 6, -4, -2, -2, 1, 3, -1},
    /*P*/ {-1, -2, -2, -1, -3, -1, -1, -2, -2, -3, -3, -1, -2, -4, 7, -1, -1, -4, -3, -2},
    /*S*/ {1, -1, 1, 0, -1, 0, 0, 0, -1, -2, -2, 0, -1, -2, -1, 4, 1, -3, -2, -2},
    /*T*/ {0, -1, 0, -1, -1, -1, -1, -2, -2, -1, -1, -1, -1, -2, -1, 1, 5, -2, -2, 0},
    /*W*/ {-3, -3, -4, -4, -2, -2, -3, -2, -2, -3, -2, -3, -1, 1, -4, -3, -2, 11, 2, -3},
    /*Y*/ {-2, -2, -2, -3, -2, -1, -2, -3, 2, -1, -1, -2, -1, 3, -3, -2, -2, 2, 7, -1},
    /*V*/ {0, -3, -3, -3, -1, -2, -2, -3, -3, 3, 1, -2, 1, -1, -2, -2, 0, -3, -1, 4},
};

int ncbi_index(char c) {
    for (int i = 0; i < 20; ++i)
        if (kNcbiOrder[i] == c) return i;
    throw DataError(std::string("alignment: residue '") + c + "' outside the natural alphabet");
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

enum State : int { kM = 0, kX = 1, kY = 2 };  // match/mismatch, gap in b, gap in a

}  // namespace

void AlignmentParams::validate() const {
    if (!(gap_open > 0.0)) throw DataError("alignment: gap_open must be > 0");
    if (!(gap_extend > 0.0)) throw DataError("alignment: gap_extend must be > 0");
}

int blosum62(char a, char b) { return kBlosum62[ncbi_index(a)][ncbi_index(b)]; }

namespace {

// Gotoh over canonically ordered inputs; tie preference M > X > Y.
Alignment align_ordered(const std::string& a, const std::string& b, const AlignmentParams& p) {
    const int n = static_cast<int>(a.size()), m = static_cast<int>(b.size());
    const double open_cost = p.gap_open + p.gap_extend, ext_cost = p.gap_extend;
    const auto idx = [m](int i, int j) { return static_cast<size_t>(i) * (m + 1) + j; };

    std::vector<double> M(idx(n, m) + 1, kNegInf), X(idx(n, m) + 1, kNegInf),
        Y(idx(n, m) + 1, kNegInf);
    std::vector<int8_t> fromM(M.size(), -1), fromX(M.size(), -1), fromY(M.size(), -1);

    M[idx(0, 0)] = 0.0;
    for (int i = 1; i <= n; ++i) {
        X[idx(i, 0)] = -(p.gap_open + i * p.gap_extend);
        fromX[idx(i, 0)] = i == 1 ? kM : kX;
    }
    for (int j = 1; j <= m; ++j) {
        Y[idx(0, j)] = -(p.gap_open + j * p.gap_extend);
        fromY[idx(0, j)] = j == 1 ? kM : kY;
    }

    const auto best3 = [](double vm, double vx, double vy, int8_t& from) {
        double v = vm;
        from = kM;
        if (vx > v) v = vx, from = kX;
        if (vy > v) v = vy, from = kY;
        return v;
    };

    for (int i = 1; i <= n; ++i) {
        for (int j = 1; j <= m; ++j) {
            const size_t c = idx(i, j), d = idx(i - 1, j - 1), u = idx(i - 1, j),
                         l = idx(i, j - 1);
            const double s = blosum62(a[static_cast<size_t>(i - 1)], b[static_cast<size_t>(j - 1)]);
            M[c] = s + best3(M[d], X[d], Y[d], fromM[c]);
            X[c] = best3(M[u] - open_cost, X[u] - ext_cost, Y[u] - open_cost, fromX[c]);
            Y[c] = best3(M[l] - open_cost, X[l] - open_cost, Y[l] - ext_cost, fromY[c]);
        }
    }

    Alignment out;
    int8_t state;
    out.score = best3(M[idx(n, m)], X[idx(n, m)], Y[idx(n, m)], state);
    int i = n, j = m;
    while (i > 0 || j > 0) {
        const size_t c = idx(i, j);
        if (state == kM) {
            out.a.push_back(a[static_cast<size_t>(i - 1)]);
            out.b.push_back(b[static_cast<size_t>(j - 1)]);
            if (out.a.back() == out.b.back()) ++out.matches;
            state = fromM[c];
            --i, --j;
        } else if (state == kX) {
            out.a.push_back(a[static_cast<size_t>(i - 1)]);
            out.b.push_back('-');
            state = fromX[c];
            --i;
        } else {
            out.a.push_back('-');
            out.b.push_back(b[static_cast<size_t>(j - 1)]);
            state = fromY[c];
            --j;
        }
    }
    std::reverse(out.a.begin(), out.a.end());
    std::reverse(out.b.begin(), out.b.end());
    return out;
}

}  // namespace

Alignment align(const std::string& a, const std::string& b, const AlignmentParams& p) {
    p.validate();
    if (a.empty() || b.empty()) throw DataError("alignment: empty sequence");
    for (char c : a) ncbi_index(c);
    for (char c : b) ncbi_index(c);
    // Canonical input order makes tie-breaking symmetric: SIM(a,b) == SIM(b,a).
    if (a <= b) return align_ordered(a, b, p);
    Alignment swapped = align_ordered(b, a, p);
    std::swap(swapped.a, swapped.b);
    return swapped;
}

double align_identity(const std::string& a, const std::string& b, const AlignmentParams& p) {
    return align(a, b, p).identity();
}

void LogLikTable::set(const std::string& j, const std::string& k, double loglik) {
    if (loglik > 0.0)
        throw DataError("loglik table: log p(" + k + "|" + j + ") must be <= 0");
    t_[{j, k}] = loglik;
}

double LogLikTable::at(const std::string& j, const std::string& k) const {
    const auto it = t_.find({j, k});
    if (it == t_.end())
        throw DataError("loglik table: missing pair (condition " + j + ", sequence " + k + ")");
    return it->second;
}

void TmTable::set(const std::string& g, const std::string& k, double tm) {
    if (tm < 0.0 || tm > 1.0) throw DataError("tm table: TM(" + g + ", " + k + ") outside [0, 1]");
    t_[{g, k}] = tm;
}

double TmTable::at(const std::string& g, const std::string& k) const {
    const auto it = t_.find({g, k});
    if (it == t_.end()) throw DataError("tm table: missing pair (" + g + ", " + k + ")");
    return it->second;
}

TmTable parse_tm_tsv(const std::string& text) {
    TmTable tm;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        std::string g, k, score;
        if (!std::getline(fields, g, '\t') || !std::getline(fields, k, '\t') ||
            !std::getline(fields, score, '\t'))
            throw DataError("tm tsv: line " + std::to_string(lineno) +
                            " needs id_g<TAB>id_k<TAB>tm_score");
        size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(score, &used);
        } catch (const std::exception&) {
            throw DataError("tm tsv: line " + std::to_string(lineno) + " has a non-numeric score");
        }
        if (used != score.size())
            throw DataError("tm tsv: line " + std::to_string(lineno) + " has a non-numeric score");
        tm.set(g, k, v);
    }
    return tm;
}

double ppl_fold(const std::vector<std::string>& members, const LogLikTable& ll,
                const std::map<std::string, int>& lengths) {
    if (members.empty()) throw DataError("ppl_fold: empty fold");
    double acc = 0.0;
    for (const std::string& j : members) {
        double best = kNegInf;
        for (const std::string& k : members) {
            const auto lit = lengths.find(k);
            if (lit == lengths.end() || lit->second < 1)
                throw DataError("ppl_fold: missing or invalid length for " + k);
            best = std::max(best, ll.at(j, k) / lit->second);
        }
        acc += best;
    }
    return std::exp(-acc / static_cast<double>(members.size()));
}

double ppl_structure(const std::vector<double>& self_loglik, const std::vector<int>& lengths) {
    if (self_loglik.empty()) throw DataError("ppl_structure: empty set");
    if (self_loglik.size() != lengths.size())
        throw DataError("ppl_structure: loglik/length size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < self_loglik.size(); ++i) {
        if (lengths[i] < 1) throw DataError("ppl_structure: lengths must be >= 1");
        if (self_loglik[i] > 0.0) throw DataError("ppl_structure: log-likelihoods must be <= 0");
        acc += self_loglik[i] / lengths[i];
    }
    return std::exp(-acc / static_cast<double>(self_loglik.size()));
}

double sr_structure(const NativeEntry& native, const std::vector<std::string>& generated,
                    const AlignmentParams& p) {
    if (generated.empty()) throw DataError("sr: no generated sequences for " + native.id);
    double acc = 0.0;
    for (const std::string& g : generated) acc += align_identity(g, native.seq, p);
    return 100.0 * acc / static_cast<double>(generated.size());
}

double sr_fold(const std::vector<NativeEntry>& members,
               const std::map<std::string, std::vector<std::string>>& generated,
               const AlignmentParams& p) {
    if (members.empty()) throw DataError("sr_fold: empty fold");
    double fold_acc = 0.0;
    for (const NativeEntry& j : members) {
        const auto git = generated.find(j.id);
        if (git == generated.end() || git->second.empty())
            throw DataError("sr_fold: no generated set for " + j.id);
        double cond_acc = 0.0;
        for (const std::string& g : git->second) {
            double best = 0.0;
            for (const NativeEntry& k : members)
                best = std::max(best, align_identity(g, k.seq, p));
            cond_acc += best;
        }
        fold_acc += cond_acc / static_cast<double>(git->second.size());
    }
    return 100.0 * fold_acc / static_cast<double>(members.size());
}

double cov_fold(const std::vector<NativeEntry>& members, const std::string& representative,
                const std::vector<std::string>& generated_for_rep, double threshold,
                const AlignmentParams& p) {
    if (members.empty()) throw DataError("cov_fold: empty fold");
    const bool known = std::any_of(members.begin(), members.end(),
                                   [&](const NativeEntry& e) { return e.id == representative; });
    if (!known) throw DataError("cov_fold: representative " + representative + " not in the fold");
    if (generated_for_rep.empty())
        throw DataError("cov_fold: no generated sequences for " + representative);
    int covered = 0;
    for (const NativeEntry& j : members) {
        double best = 0.0;
        for (const std::string& g : generated_for_rep)
            best = std::max(best, align_identity(g, j.seq, p));
        if (best >= threshold) ++covered;
    }
    return static_cast<double>(covered) / static_cast<double>(members.size());
}

double tr_structure(const std::string& member_id, const std::vector<std::string>& generated_ids,
                    const TmTable& tm) {
    if (generated_ids.empty()) throw DataError("tr: no generated structures for " + member_id);
    double acc = 0.0;
    for (const std::string& g : generated_ids) acc += tm.at(g, member_id);
    return acc / static_cast<double>(generated_ids.size());
}

double tr_fold(const std::vector<std::string>& member_ids,
               const std::map<std::string, std::vector<std::string>>& generated_ids,
               const TmTable& tm) {
    if (member_ids.empty()) throw DataError("tr_fold: empty fold");
    double fold_acc = 0.0;
    for (const std::string& j : member_ids) {
        const auto git = generated_ids.find(j);
        if (git == generated_ids.end() || git->second.empty())
            throw DataError("tr_fold: no generated set for " + j);
        double cond_acc = 0.0;
        for (const std::string& g : git->second) {
            double best = kNegInf;
            for (const std::string& k : member_ids) best = std::max(best, tm.at(g, k));
            cond_acc += best;
        }
        fold_acc += cond_acc / static_cast<double>(git->second.size());
    }
    return fold_acc / static_cast<double>(member_ids.size());
}

double amsi(const std::vector<std::string>& test, const std::vector<std::string>& train,
            const AlignmentParams& p) {
    if (test.empty() || train.empty()) throw DataError("amsi: empty sequence set");
    double acc = 0.0;
    for (const std::string& t : test) {
        double best = 0.0;
        for (const std::string& s : train) best = std::max(best, align_identity(t, s, p));
        acc += best;
    }
    return 100.0 * acc / static_cast<double>(test.size());
}

EmbeddingRow mean_pool_latent(const std::string& id, const std::string& fold_id,
                              const tc::Tensor& h) {
    if (h.rows() < 1 || h.cols() < 1) throw DataError("mean_pool_latent: empty latent");
    EmbeddingRow row{id, fold_id, std::vector<double>(static_cast<size_t>(h.cols()), 0.0)};
    for (int r = 0; r < h.rows(); ++r)
        for (int c = 0; c < h.cols(); ++c) row.e[static_cast<size_t>(c)] += h.at(r, c);
    for (double& v : row.e) {
        v /= h.rows();
        if (!std::isfinite(v)) throw DataError("mean_pool_latent: non-finite latent");
    }
    return row;
}

double within_fold_mean_pairwise_l2(const std::vector<EmbeddingRow>& rows) {
    double acc = 0.0;
    long long pairs = 0;
    for (size_t i = 0; i < rows.size(); ++i) {
        for (size_t j = i + 1; j < rows.size(); ++j) {
            if (rows[i].fold_id != rows[j].fold_id) continue;
            if (rows[i].e.size() != rows[j].e.size())
                throw DataError("embedding rows: dimension mismatch");
            double d2 = 0.0;
            for (size_t c = 0; c < rows[i].e.size(); ++c) {
                const double diff = rows[i].e[c] - rows[j].e[c];
                d2 += diff * diff;
            }
            acc += std::sqrt(d2);
            ++pairs;
        }
    }
    if (pairs == 0) throw DataError("embedding rows: no same-fold pair");
    return acc / static_cast<double>(pairs);
}

std::string embedding_tsv(const std::vector<EmbeddingRow>& rows) {
    if (rows.empty()) throw DataError("embedding_tsv: no rows");
    const size_t d = rows.front().e.size();
    std::string out = "id\tfold_id";
    for (size_t c = 0; c < d; ++c) out += "\te" + std::to_string(c);
    out += "\n";
    char buf[64];
    for (const EmbeddingRow& r : rows) {
        if (r.e.size() != d) throw DataError("embedding rows: dimension mismatch");
        out += r.id + "\t" + r.fold_id;
        for (double v : r.e) {
            std::snprintf(buf, sizeof buf, "\t%.10g", v);
            out += buf;
        }
        out += "\n";
    }
    bool any_pair = false;
    for (size_t i = 0; i < rows.size() && !any_pair; ++i)
        for (size_t j = i + 1; j < rows.size(); ++j)
            if (rows[i].fold_id == rows[j].fold_id) {
                any_pair = true;
                break;
            }
    std::snprintf(buf, sizeof buf, "%.10g",
                  any_pair ? within_fold_mean_pairwise_l2(rows)
                           : std::numeric_limits<double>::quiet_NaN());
    out += std::string("# within_fold_mean_pairwise_l2\t") + buf + "\n";
    return out;
}

void embedding_dump(const std::vector<EmbeddingRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("embedding_dump: cannot open " + path);
    out << embedding_tsv(rows);
    if (!out) throw DataError("embedding_dump: write failed for " + path);
}

MetricSummary summarize(const std::map<std::string, double>& per_fold) {
    if (per_fold.empty()) throw DataError("summarize: no per-fold values");
    MetricSummary s;
    s.per_fold = per_fold;
    for (const auto& [id, v] : per_fold) s.mean += v;
    s.mean /= static_cast<double>(per_fold.size());
    double var = 0.0;
    for (const auto& [id, v] : per_fold) var += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(per_fold.size()));
    return s;
}

std::string report_json(const std::map<std::string, MetricSummary>& metrics) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, summary] : metrics) {
        nlohmann::json entry;
        entry["per_fold"] = summary.per_fold;
        entry["mean"] = summary.mean;
        entry["std"] = summary.stddev;
        j[name] = entry;
    }
    return j.dump(2);
}

}  // namespace fold2seq::metrics
