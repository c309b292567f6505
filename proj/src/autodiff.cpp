#include "fold2seq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace fold2seq::tc {

namespace {

[[noreturn]] void shape_error(const std::string& op, const Tensor& a) {
    throw DataError(op + ": bad shape " + a.shape_str());
}

[[noreturn]] void shape_error(const std::string& op, const Tensor& a, const Tensor& b) {
    throw DataError(op + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

void require_rank2(const std::string& op, const Tensor& t) {
    if (t.shape.size() != 2) shape_error(op, t);
}

// C(m,n) += A(m,k) * B(k,n)
void matmul_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* Ai = A + static_cast<size_t>(i) * k;
        double* Ci = C + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double a = Ai[kk];
            const double* Bk = B + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) Ci[j] += a * Bk[j];
        }
    }
}

// C(m,n) += A(m,k) * B(n,k)^T  (rows of both operands are contiguous)
void matmul_nt_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* Ai = A + static_cast<size_t>(i) * k;
        double* Ci = C + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* Bj = B + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += Ai[kk] * Bj[kk];
            Ci[j] += acc;
        }
    }
}

// C(k,n) += A(m,k)^T * B(m,n)
void matmul_tn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* Ai = A + static_cast<size_t>(i) * k;
        const double* Bi = B + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double a = Ai[kk];
            double* Ck = C + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) Ck[j] += a * Bi[j];
        }
    }
}

}  // namespace

int Graph::check(Var x) const {
    if (x.id < 0 || x.id >= static_cast<int>(nodes_.size()))
        throw DataError("invalid Var handle");
    return x.id;
}

Var Graph::push(Tensor val, std::function<void()> back, ParamTensor* bound) {
    nodes_.push_back(Node{std::move(val), Tensor{}, std::move(back), bound});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::input(Tensor t) { return push(std::move(t)); }

Var Graph::param(ParamTensor& p) { return push(p.value, {}, &p); }

Var Graph::add(Var a, Var b) {
    const Tensor &ta = val(check(a)), &tb = val(check(b));
    if (!ta.same_shape(tb)) shape_error("add", ta, tb);
    Tensor out = ta;
    for (size_t i = 0; i < out.size(); ++i) out.v[i] += tb.v[i];
    const int ia = a.id, ib = b.id;
    return push(std::move(out), [this, ia, ib, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor &ga = g(ia), &gb = g(ib);
        for (size_t i = 0; i < go.size(); ++i) {
            ga.v[i] += go.v[i];
            gb.v[i] += go.v[i];
        }
    });
}

Var Graph::sub(Var a, Var b) {
    const Tensor &ta = val(check(a)), &tb = val(check(b));
    if (!ta.same_shape(tb)) shape_error("sub", ta, tb);
    Tensor out = ta;
    for (size_t i = 0; i < out.size(); ++i) out.v[i] -= tb.v[i];
    return push(std::move(out), [this, ia = a.id, ib = b.id, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor &ga = g(ia), &gb = g(ib);
        for (size_t i = 0; i < go.size(); ++i) {
            ga.v[i] += go.v[i];
            gb.v[i] -= go.v[i];
        }
    });
}

Var Graph::add_rowvec(Var x, Var b) {
    const Tensor &tx = val(check(x)), &tb = val(check(b));
    require_rank2("add_rowvec", tx);
    if (static_cast<int>(tb.size()) != tx.cols()) shape_error("add_rowvec", tx, tb);
    Tensor out = tx;
    const int R = tx.rows(), C = tx.cols();
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) out.v[static_cast<size_t>(r) * C + c] += tb.v[c];
    return push(std::move(out), [this, ix = x.id, ib = b.id, R, C, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor &gx = g(ix), &gb = g(ib);
        for (int r = 0; r < R; ++r) {
            for (int c = 0; c < C; ++c) {
                const double v = go.v[static_cast<size_t>(r) * C + c];
                gx.v[static_cast<size_t>(r) * C + c] += v;
                gb.v[c] += v;
            }
        }
    });
}

Var Graph::scale(Var x, double s) {
    Tensor out = val(check(x));
    for (auto& v : out.v) v *= s;
    return push(std::move(out), [this, ix = x.id, s, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor& gx = g(ix);
        for (size_t i = 0; i < go.size(); ++i) gx.v[i] += s * go.v[i];
    });
}

Var Graph::mul(Var a, Var b) {
    const Tensor &ta = val(check(a)), &tb = val(check(b));
    if (!ta.same_shape(tb)) shape_error("mul", ta, tb);
    Tensor out = ta;
    for (size_t i = 0; i < out.size(); ++i) out.v[i] *= tb.v[i];
    return push(std::move(out), [this, ia = a.id, ib = b.id, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        const Tensor &va = val(ia), &vb = val(ib);
        Tensor &ga = g(ia), &gb = g(ib);
        for (size_t i = 0; i < go.size(); ++i) {
            ga.v[i] += go.v[i] * vb.v[i];
            gb.v[i] += go.v[i] * va.v[i];
        }
    });
}

Var Graph::relu(Var x) {
    Tensor out = val(check(x));
    for (auto& v : out.v) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), [this, ix = x.id, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        const Tensor& vx = val(ix);
        Tensor& gx = g(ix);
        for (size_t i = 0; i < go.size(); ++i)
            if (vx.v[i] > 0.0) gx.v[i] += go.v[i];
    });
}

Var Graph::matmul(Var a, Var b) {
    const Tensor &ta = val(check(a)), &tb = val(check(b));
    require_rank2("matmul", ta);
    require_rank2("matmul", tb);
    if (ta.cols() != tb.rows()) shape_error("matmul", ta, tb);
    const int m = ta.rows(), k = ta.cols(), n = tb.cols();
    Tensor out({m, n});
    matmul_acc(ta.v.data(), tb.v.data(), out.v.data(), m, k, n);
    return push(std::move(out), [this, ia = a.id, ib = b.id, m, k, n, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        // dA += dC * B^T ; dB += A^T * dC
        matmul_nt_acc(go.v.data(), val(ib).v.data(), g(ia).v.data(), m, n, k);
        matmul_tn_acc(val(ia).v.data(), go.v.data(), g(ib).v.data(), m, k, n);
    });
}

Var Graph::matmul_nt(Var a, Var b) {
    const Tensor &ta = val(check(a)), &tb = val(check(b));
    require_rank2("matmul_nt", ta);
    require_rank2("matmul_nt", tb);
    if (ta.cols() != tb.cols()) shape_error("matmul_nt", ta, tb);
    const int m = ta.rows(), k = ta.cols(), n = tb.rows();
    Tensor out({m, n});
    matmul_nt_acc(ta.v.data(), tb.v.data(), out.v.data(), m, k, n);
    return push(std::move(out), [this, ia = a.id, ib = b.id, m, k, n, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        // C = A B^T: dA += dC * B ; dB += dC^T * A
        matmul_acc(go.v.data(), val(ib).v.data(), g(ia).v.data(), m, n, k);
        matmul_tn_acc(go.v.data(), val(ia).v.data(), g(ib).v.data(), m, n, k);
    });
}

Var Graph::transpose(Var x) {
    const Tensor& tx = val(check(x));
    require_rank2("transpose", tx);
    const int R = tx.rows(), C = tx.cols();
    Tensor out({C, R});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) out.at(c, r) = tx.at(r, c);
    return push(std::move(out), [this, ix = x.id, R, C, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor& gx = g(ix);
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) gx.at(r, c) += go.at(c, r);
    });
}

Var Graph::reshape(Var x, std::vector<int> shape) {
    const Tensor& tx = val(check(x));
    if (Tensor::count(shape) != static_cast<long long>(tx.size()))
        throw DataError("reshape: cannot view " + tx.shape_str() + " as " +
                        Tensor(shape).shape_str());
    Tensor out = tx;
    out.shape = std::move(shape);
    return push(std::move(out), [this, ix = x.id, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor& gx = g(ix);
        for (size_t i = 0; i < go.size(); ++i) gx.v[i] += go.v[i];
    });
}

Var Graph::slice_cols(Var x, int c0, int c1) {
    const Tensor& tx = val(check(x));
    require_rank2("slice_cols", tx);
    if (c0 < 0 || c1 > tx.cols() || c0 >= c1) shape_error("slice_cols", tx);
    const int R = tx.rows(), W = c1 - c0;
    Tensor out({R, W});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < W; ++c) out.at(r, c) = tx.at(r, c0 + c);
    return push(std::move(out), [this, ix = x.id, R, W, c0, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor& gx = g(ix);
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < W; ++c) gx.at(r, c0 + c) += go.at(r, c);
    });
}

Var Graph::slice_rows(Var x, int r0, int r1) {
    const Tensor& tx = val(check(x));
    require_rank2("slice_rows", tx);
    if (r0 < 0 || r1 > tx.rows() || r0 >= r1) shape_error("slice_rows", tx);
    const int C = tx.cols(), H = r1 - r0;
    Tensor out({H, C});
    std::memcpy(out.v.data(), tx.v.data() + static_cast<size_t>(r0) * C,
                static_cast<size_t>(H) * C * sizeof(double));
    return push(std::move(out), [this, ix = x.id, r0, H, C, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor& gx = g(ix);
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < C; ++c) gx.at(r0 + r, c) += go.at(r, c);
    });
}

Var Graph::concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw DataError("concat_cols: empty input list");
    const int R = val(check(xs[0])).rows();
    int total = 0;
    for (Var x : xs) {
        const Tensor& t = val(check(x));
        require_rank2("concat_cols", t);
        if (t.rows() != R) shape_error("concat_cols", val(xs[0].id), t);
        total += t.cols();
    }
    Tensor out({R, total});
    int off = 0;
    std::vector<int> ids, widths, offsets;
    for (Var x : xs) {
        const Tensor& t = val(x.id);
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < t.cols(); ++c) out.at(r, off + c) = t.at(r, c);
        ids.push_back(x.id);
        widths.push_back(t.cols());
        offsets.push_back(off);
        off += t.cols();
    }
    return push(std::move(out), [this, ids, widths, offsets, R, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        for (size_t i = 0; i < ids.size(); ++i) {
            Tensor& gx = g(ids[i]);
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < widths[i]; ++c) gx.at(r, c) += go.at(r, offsets[i] + c);
        }
    });
}

Var Graph::concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw DataError("concat_rows: empty input list");
    const int C = val(check(xs[0])).cols();
    int total = 0;
    for (Var x : xs) {
        const Tensor& t = val(check(x));
        require_rank2("concat_rows", t);
        if (t.cols() != C) shape_error("concat_rows", val(xs[0].id), t);
        total += t.rows();
    }
    Tensor out({total, C});
    int off = 0;
    std::vector<int> ids, heights, offsets;
    for (Var x : xs) {
        const Tensor& t = val(x.id);
        std::memcpy(out.v.data() + static_cast<size_t>(off) * C, t.v.data(),
                    t.size() * sizeof(double));
        ids.push_back(x.id);
        heights.push_back(t.rows());
        offsets.push_back(off);
        off += t.rows();
    }
    return push(std::move(out), [this, ids, heights, offsets, C, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        for (size_t i = 0; i < ids.size(); ++i) {
            Tensor& gx = g(ids[i]);
            for (int r = 0; r < heights[i]; ++r)
                for (int c = 0; c < C; ++c) gx.at(r, c) += go.at(offsets[i] + r, c);
        }
    });
}

Var Graph::softmax_rows(Var x) {
    const Tensor& tx = val(check(x));
    require_rank2("softmax_rows", tx);
    const int R = tx.rows(), C = tx.cols();
    Tensor out = tx;
    for (int r = 0; r < R; ++r) {
        double m = out.at(r, 0);
        for (int c = 1; c < C; ++c) m = std::max(m, out.at(r, c));
        double s = 0.0;
        for (int c = 0; c < C; ++c) {
            out.at(r, c) = std::exp(out.at(r, c) - m);
            s += out.at(r, c);
        }
        for (int c = 0; c < C; ++c) out.at(r, c) /= s;
    }
    return push(std::move(out), [this, ix = x.id, R, C, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        const Tensor& y = val(id);
        Tensor& gx = g(ix);
        for (int r = 0; r < R; ++r) {
            double dot = 0.0;
            for (int c = 0; c < C; ++c) dot += go.at(r, c) * y.at(r, c);
            for (int c = 0; c < C; ++c) gx.at(r, c) += y.at(r, c) * (go.at(r, c) - dot);
        }
    });
}

Var Graph::log_softmax_rows(Var x) {
    const Tensor& tx = val(check(x));
    require_rank2("log_softmax_rows", tx);
    const int R = tx.rows(), C = tx.cols();
    Tensor out = tx;
    for (int r = 0; r < R; ++r) {
        double m = out.at(r, 0);
        for (int c = 1; c < C; ++c) m = std::max(m, out.at(r, c));
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += std::exp(out.at(r, c) - m);
        const double lse = m + std::log(s);
        for (int c = 0; c < C; ++c) out.at(r, c) -= lse;
    }
    return push(std::move(out), [this, ix = x.id, R, C, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        const Tensor& y = val(id);  // log-probs
        Tensor& gx = g(ix);
        for (int r = 0; r < R; ++r) {
            double sum = 0.0;
            for (int c = 0; c < C; ++c) sum += go.at(r, c);
            for (int c = 0; c < C; ++c) gx.at(r, c) += go.at(r, c) - std::exp(y.at(r, c)) * sum;
        }
    });
}

Var Graph::l2_normalize_rows(Var x) {
    const Tensor& tx = val(check(x));
    require_rank2("l2_normalize_rows", tx);
    const int R = tx.rows(), C = tx.cols();
    Tensor out = tx;
    std::vector<double> inv_norm(R);
    for (int r = 0; r < R; ++r) {
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += out.at(r, c) * out.at(r, c);
        inv_norm[r] = 1.0 / std::sqrt(s + 1e-12);
        for (int c = 0; c < C; ++c) out.at(r, c) *= inv_norm[r];
    }
    return push(std::move(out),
                [this, ix = x.id, R, C, inv_norm, id = static_cast<int>(nodes_.size())] {
                    const Tensor& go = g(id);
                    const Tensor& y = val(id);
                    Tensor& gx = g(ix);
                    for (int r = 0; r < R; ++r) {
                        double dot = 0.0;
                        for (int c = 0; c < C; ++c) dot += go.at(r, c) * y.at(r, c);
                        for (int c = 0; c < C; ++c)
                            gx.at(r, c) += inv_norm[r] * (go.at(r, c) - y.at(r, c) * dot);
                    }
                });
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor &tx = val(check(x)), &tg = val(check(gamma)), &tb = val(check(beta));
    require_rank2("layer_norm", tx);
    const int R = tx.rows(), C = tx.cols();
    if (static_cast<int>(tg.size()) != C || static_cast<int>(tb.size()) != C)
        shape_error("layer_norm", tx, tg);

    Tensor out({R, C});
    Tensor xhat({R, C});
    std::vector<double> inv_std(R);
    for (int r = 0; r < R; ++r) {
        double mu = 0.0;
        for (int c = 0; c < C; ++c) mu += tx.at(r, c);
        mu /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) {
            const double d = tx.at(r, c) - mu;
            var += d * d;
        }
        var /= C;
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (int c = 0; c < C; ++c) {
            xhat.at(r, c) = (tx.at(r, c) - mu) * inv_std[r];
            out.at(r, c) = tg.v[c] * xhat.at(r, c) + tb.v[c];
        }
    }
    return push(std::move(out), [this, ix = x.id, ig = gamma.id, ib = beta.id, R, C,
                                 xh = std::move(xhat), inv_std,
                                 id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        const Tensor& tg = val(ig);
        Tensor &gx = g(ix), &gg = g(ig), &gb = g(ib);
        for (int r = 0; r < R; ++r) {
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (int c = 0; c < C; ++c) {
                const double dy = go.at(r, c);
                gb.v[c] += dy;
                gg.v[c] += dy * xh.at(r, c);
                const double dxhat = dy * tg.v[c];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xh.at(r, c);
            }
            mean_dxhat /= C;
            mean_dxhat_xhat /= C;
            for (int c = 0; c < C; ++c) {
                const double dxhat = go.at(r, c) * tg.v[c];
                gx.at(r, c) += inv_std[r] * (dxhat - mean_dxhat - xh.at(r, c) * mean_dxhat_xhat);
            }
        }
    });
}

Var Graph::batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
                      bool training, double momentum, double eps) {
    const Tensor &tx = val(check(x)), &tg = val(check(gamma)), &tb = val(check(beta));
    require_rank2("batch_norm", tx);
    const int Ch = tx.rows(), S = tx.cols();
    if (static_cast<int>(tg.size()) != Ch || static_cast<int>(tb.size()) != Ch ||
        static_cast<int>(running_mean.size()) != Ch || static_cast<int>(running_var.size()) != Ch)
        shape_error("batch_norm", tx, tg);

    Tensor out({Ch, S});
    if (!training) {
        // deterministic affine map of stored statistics
        std::vector<double> inv_std(Ch);
        for (int c = 0; c < Ch; ++c) inv_std[c] = 1.0 / std::sqrt(running_var.v[c] + eps);
        Tensor xhat({Ch, S});
        for (int c = 0; c < Ch; ++c)
            for (int s = 0; s < S; ++s) {
                xhat.at(c, s) = (tx.at(c, s) - running_mean.v[c]) * inv_std[c];
                out.at(c, s) = tg.v[c] * xhat.at(c, s) + tb.v[c];
            }
        return push(std::move(out), [this, ix = x.id, ig = gamma.id, ib = beta.id, Ch, S, inv_std,
                                     xh = std::move(xhat), id = static_cast<int>(nodes_.size())] {
            const Tensor& go = g(id);
            const Tensor& tg2 = val(ig);
            Tensor &gx = g(ix), &gg = g(ig), &gb = g(ib);
            for (int c = 0; c < Ch; ++c) {
                for (int s = 0; s < S; ++s) {
                    const double dy = go.at(c, s);
                    gb.v[c] += dy;
                    gg.v[c] += dy * xh.at(c, s);
                    gx.at(c, s) += dy * tg2.v[c] * inv_std[c];
                }
            }
        });
    }

    Tensor xhat({Ch, S});
    std::vector<double> inv_std(Ch);
    for (int c = 0; c < Ch; ++c) {
        double mu = 0.0;
        for (int s = 0; s < S; ++s) mu += tx.at(c, s);
        mu /= S;
        double var = 0.0;
        for (int s = 0; s < S; ++s) {
            const double d = tx.at(c, s) - mu;
            var += d * d;
        }
        var /= S;  // biased, consistent with the normalization
        inv_std[c] = 1.0 / std::sqrt(var + eps);
        for (int s = 0; s < S; ++s) {
            xhat.at(c, s) = (tx.at(c, s) - mu) * inv_std[c];
            out.at(c, s) = tg.v[c] * xhat.at(c, s) + tb.v[c];
        }
        running_mean.v[c] = (1.0 - momentum) * running_mean.v[c] + momentum * mu;
        running_var.v[c] = (1.0 - momentum) * running_var.v[c] + momentum * var;
    }
    return push(std::move(out), [this, ix = x.id, ig = gamma.id, ib = beta.id, Ch, S,
                                 xh = std::move(xhat), inv_std,
                                 id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        const Tensor& tg2 = val(ig);
        Tensor &gx = g(ix), &gg = g(ig), &gb = g(ib);
        for (int c = 0; c < Ch; ++c) {
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (int s = 0; s < S; ++s) {
                const double dy = go.at(c, s);
                gb.v[c] += dy;
                gg.v[c] += dy * xh.at(c, s);
                const double dxhat = dy * tg2.v[c];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xh.at(c, s);
            }
            mean_dxhat /= S;
            mean_dxhat_xhat /= S;
            for (int s = 0; s < S; ++s) {
                const double dxhat = go.at(c, s) * tg2.v[c];
                gx.at(c, s) += inv_std[c] * (dxhat - mean_dxhat - xh.at(c, s) * mean_dxhat_xhat);
            }
        }
    });
}

Var Graph::conv3d(Var x, Var w, Var b, int stride, int pad, int kernel) {
    const Tensor &tx = val(check(x)), &tw = val(check(w)), &tb = val(check(b));
    if (tx.shape.size() != 4) shape_error("conv3d", tx);
    if (kernel != 1 && kernel != 3) throw DataError("conv3d: kernel must be 1 or 3");
    const int Cin = tx.shape[0], D = tx.shape[1], H = tx.shape[2], W = tx.shape[3];
    const int K = kernel, CK = Cin * K * K * K;
    if (tw.shape.size() != 2 || tw.cols() != CK) shape_error("conv3d", tw, tx);
    const int Cout = tw.rows();
    if (static_cast<int>(tb.size()) != Cout) shape_error("conv3d", tw, tb);
    if (stride < 1) throw DataError("conv3d: stride must be >= 1");
    const int Do = (D + 2 * pad - K) / stride + 1;
    const int Ho = (H + 2 * pad - K) / stride + 1;
    const int Wo = (W + 2 * pad - K) / stride + 1;
    if (Do < 1 || Ho < 1 || Wo < 1) shape_error("conv3d", tx);
    const int P = Do * Ho * Wo;

    // im2col: row = (cin, kd, kh, kw), column = output position
    Tensor col({CK, P});
    {
        int row = 0;
        for (int ci = 0; ci < Cin; ++ci) {
            const double* xc = tx.v.data() + static_cast<size_t>(ci) * D * H * W;
            for (int kd = 0; kd < K; ++kd)
                for (int kh = 0; kh < K; ++kh)
                    for (int kw = 0; kw < K; ++kw, ++row) {
                        double* dst = col.v.data() + static_cast<size_t>(row) * P;
                        int p = 0;
                        for (int od = 0; od < Do; ++od) {
                            const int d = od * stride - pad + kd;
                            for (int oh = 0; oh < Ho; ++oh) {
                                const int h = oh * stride - pad + kh;
                                const bool in_dh =
                                    d >= 0 && d < D && h >= 0 && h < H;
                                for (int ow = 0; ow < Wo; ++ow, ++p) {
                                    const int ww = ow * stride - pad + kw;
                                    dst[p] = (in_dh && ww >= 0 && ww < W)
                                                 ? xc[(static_cast<size_t>(d) * H + h) * W + ww]
                                                 : 0.0;
                                }
                            }
                        }
                    }
        }
    }

    Tensor out({Cout, Do, Ho, Wo});
    matmul_acc(tw.v.data(), col.v.data(), out.v.data(), Cout, CK, P);
    for (int co = 0; co < Cout; ++co) {
        double* oc = out.v.data() + static_cast<size_t>(co) * P;
        for (int p = 0; p < P; ++p) oc[p] += tb.v[co];
    }

    return push(std::move(out), [this, ix = x.id, iw = w.id, ibb = b.id, col = std::move(col),
                                 Cin, D, H, W, Cout, CK, P, Do, Ho, Wo, stride, pad, K,
                                 id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);  // (Cout, Do, Ho, Wo) flat = (Cout, P)
        Tensor &gx = g(ix), &gw = g(iw), &gb = g(ibb);
        for (int co = 0; co < Cout; ++co) {
            const double* gc = go.v.data() + static_cast<size_t>(co) * P;
            double acc = 0.0;
            for (int p = 0; p < P; ++p) acc += gc[p];
            gb.v[co] += acc;
        }
        // dW += dOut * col^T
        matmul_nt_acc(go.v.data(), col.v.data(), gw.v.data(), Cout, P, CK);
        // dcol = W^T * dOut, then scatter back (col2im)
        Tensor dcol({CK, P});
        matmul_tn_acc(val(iw).v.data(), go.v.data(), dcol.v.data(), Cout, CK, P);
        int row = 0;
        for (int ci = 0; ci < Cin; ++ci) {
            double* xc = gx.v.data() + static_cast<size_t>(ci) * D * H * W;
            for (int kd = 0; kd < K; ++kd)
                for (int kh = 0; kh < K; ++kh)
                    for (int kw = 0; kw < K; ++kw, ++row) {
                        const double* src = dcol.v.data() + static_cast<size_t>(row) * P;
                        int p = 0;
                        for (int od = 0; od < Do; ++od) {
                            const int d = od * stride - pad + kd;
                            for (int oh = 0; oh < Ho; ++oh) {
                                const int h = oh * stride - pad + kh;
                                const bool in_dh = d >= 0 && d < D && h >= 0 && h < H;
                                for (int ow = 0; ow < Wo; ++ow, ++p) {
                                    const int ww = ow * stride - pad + kw;
                                    if (in_dh && ww >= 0 && ww < W)
                                        xc[(static_cast<size_t>(d) * H + h) * W + ww] += src[p];
                                }
                            }
                        }
                    }
        }
    });
}

Var Graph::avg_pool_cols(Var x, int k) {
    const Tensor& tx = val(check(x));
    require_rank2("avg_pool_cols", tx);
    const int R = tx.rows(), C = tx.cols();
    if (k < 1 || k > C) throw DataError("avg_pool_cols: kernel " + std::to_string(k) +
                                        " invalid for " + tx.shape_str());
    const int Co = C - k + 1;
    Tensor out({R, Co});
    for (int r = 0; r < R; ++r) {
        for (int c = 0; c < Co; ++c) {
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += tx.at(r, c + t);
            out.at(r, c) = acc / k;
        }
    }
    return push(std::move(out), [this, ix = x.id, R, Co, k, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor& gx = g(ix);
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < Co; ++c) {
                const double v = go.at(r, c) / k;
                for (int t = 0; t < k; ++t) gx.at(r, c + t) += v;
            }
    });
}

Var Graph::max_over_axis(Var x, int axis) {
    const Tensor& tx = val(check(x));
    require_rank2("max_over_axis", tx);
    if (axis != 0 && axis != 1) throw DataError("max_over_axis: axis must be 0 or 1");
    const int R = tx.rows(), C = tx.cols();
    if (axis == 0) {
        Tensor out({1, C});
        std::vector<int> arg(C, 0);
        for (int c = 0; c < C; ++c) {
            double m = tx.at(0, c);
            for (int r = 1; r < R; ++r)
                if (tx.at(r, c) > m) {  // strict: ties keep the first maximal index
                    m = tx.at(r, c);
                    arg[c] = r;
                }
            out.v[c] = m;
        }
        return push(std::move(out), [this, ix = x.id, C, arg, id = static_cast<int>(nodes_.size())] {
            const Tensor& go = g(id);
            Tensor& gx = g(ix);
            for (int c = 0; c < C; ++c) gx.at(arg[c], c) += go.v[c];
        });
    }
    Tensor out({R, 1});
    std::vector<int> arg(R, 0);
    for (int r = 0; r < R; ++r) {
        double m = tx.at(r, 0);
        for (int c = 1; c < C; ++c)
            if (tx.at(r, c) > m) {
                m = tx.at(r, c);
                arg[r] = c;
            }
        out.v[r] = m;
    }
    return push(std::move(out), [this, ix = x.id, R, arg, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor& gx = g(ix);
        for (int r = 0; r < R; ++r) gx.at(r, arg[r]) += go.v[r];
    });
}

Var Graph::mean_over_axis(Var x, int axis) {
    const Tensor& tx = val(check(x));
    require_rank2("mean_over_axis", tx);
    if (axis != 0 && axis != 1) throw DataError("mean_over_axis: axis must be 0 or 1");
    const int R = tx.rows(), C = tx.cols();
    if (axis == 0) {
        Tensor out({1, C});
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int r = 0; r < R; ++r) acc += tx.at(r, c);
            out.v[c] = acc / R;
        }
        return push(std::move(out), [this, ix = x.id, R, C, id = static_cast<int>(nodes_.size())] {
            const Tensor& go = g(id);
            Tensor& gx = g(ix);
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) gx.at(r, c) += go.v[c] / R;
        });
    }
    Tensor out({R, 1});
    for (int r = 0; r < R; ++r) {
        double acc = 0.0;
        for (int c = 0; c < C; ++c) acc += tx.at(r, c);
        out.v[r] = acc / C;
    }
    return push(std::move(out), [this, ix = x.id, R, C, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor& gx = g(ix);
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) gx.at(r, c) += go.v[r] / C;
    });
}

Var Graph::mean_all(Var x) {
    const Tensor& tx = val(check(x));
    const double n = static_cast<double>(tx.size());
    if (tx.size() == 0) throw DataError("mean_all: empty tensor");
    Tensor out({1, 1});
    for (double v : tx.v) out.v[0] += v;
    out.v[0] /= n;
    return push(std::move(out), [this, ix = x.id, n, id = static_cast<int>(nodes_.size())] {
        const double go = g(id).v[0];
        Tensor& gx = g(ix);
        for (auto& v : gx.v) v += go / n;
    });
}

Var Graph::sum_all(Var x) {
    const Tensor& tx = val(check(x));
    Tensor out({1, 1});
    for (double v : tx.v) out.v[0] += v;
    return push(std::move(out), [this, ix = x.id, id = static_cast<int>(nodes_.size())] {
        const double go = g(id).v[0];
        Tensor& gx = g(ix);
        for (auto& v : gx.v) v += go;
    });
}

Var Graph::squared_l2(Var x) {
    const Tensor& tx = val(check(x));
    Tensor out({1, 1});
    for (double v : tx.v) out.v[0] += v * v;
    return push(std::move(out), [this, ix = x.id, id = static_cast<int>(nodes_.size())] {
        const double go = g(id).v[0];
        const Tensor& vx = val(ix);
        Tensor& gx = g(ix);
        for (size_t i = 0; i < gx.size(); ++i) gx.v[i] += 2.0 * vx.v[i] * go;
    });
}

Var Graph::embedding(Var table, const std::vector<int>& ids) {
    const Tensor& tt = val(check(table));
    require_rank2("embedding", tt);
    const int V = tt.rows(), d = tt.cols(), L = static_cast<int>(ids.size());
    for (int t : ids)
        if (t < 0 || t >= V)
            throw DataError("embedding: token id " + std::to_string(t) + " outside table " +
                            tt.shape_str());
    Tensor out({L, d});
    for (int i = 0; i < L; ++i)
        std::memcpy(out.v.data() + static_cast<size_t>(i) * d,
                    tt.v.data() + static_cast<size_t>(ids[i]) * d, sizeof(double) * d);
    return push(std::move(out), [this, it = table.id, ids, d, L, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor& gt = g(it);
        for (int i = 0; i < L; ++i)
            for (int c = 0; c < d; ++c) gt.at(ids[i], c) += go.at(i, c);
    });
}

Var Graph::cross_entropy(Var logits, const std::vector<int>& targets, int ignore_index) {
    const Tensor& tx = val(check(logits));
    require_rank2("cross_entropy", tx);
    const int R = tx.rows(), C = tx.cols();
    if (static_cast<int>(targets.size()) != R)
        throw DataError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                        tx.shape_str());
    Tensor probs({R, C});
    double loss = 0.0;
    int n_valid = 0;
    for (int r = 0; r < R; ++r) {
        const int t = targets[r];
        if (t == ignore_index) continue;
        if (t < 0 || t >= C)
            throw DataError("cross_entropy: target " + std::to_string(t) + " outside " +
                            tx.shape_str());
        double m = tx.at(r, 0);
        for (int c = 1; c < C; ++c) m = std::max(m, tx.at(r, c));
        double s = 0.0;
        for (int c = 0; c < C; ++c) {
            probs.at(r, c) = std::exp(tx.at(r, c) - m);
            s += probs.at(r, c);
        }
        for (int c = 0; c < C; ++c) probs.at(r, c) /= s;
        loss += m + std::log(s) - tx.at(r, t);
        ++n_valid;
    }
    if (n_valid == 0) throw DataError("cross_entropy: every target is ignored");
    Tensor out({1, 1});
    out.v[0] = loss / n_valid;
    return push(std::move(out), [this, ix = logits.id, targets, ignore_index, R, C, n_valid,
                                 probs = std::move(probs), id = static_cast<int>(nodes_.size())] {
        const double go = g(id).v[0];
        Tensor& gx = g(ix);
        const double coef = go / n_valid;
        for (int r = 0; r < R; ++r) {
            const int t = targets[r];
            if (t == ignore_index) continue;
            for (int c = 0; c < C; ++c)
                gx.at(r, c) += coef * (probs.at(r, c) - (c == t ? 1.0 : 0.0));
        }
    });
}

Var Graph::masked_fill(Var x, const std::vector<uint8_t>& mask, double value) {
    const Tensor& tx = val(check(x));
    if (mask.size() != tx.size())
        throw DataError("masked_fill: mask size " + std::to_string(mask.size()) + " for " +
                        tx.shape_str());
    Tensor out = tx;
    for (size_t i = 0; i < out.size(); ++i)
        if (mask[i]) out.v[i] = value;
    return push(std::move(out), [this, ix = x.id, mask, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor& gx = g(ix);
        for (size_t i = 0; i < go.size(); ++i)
            if (!mask[i]) gx.v[i] += go.v[i];
    });
}

Var Graph::stop_gradient(Var x) { return push(val(check(x))); }

Var Graph::st_hard_one_hot(Var probs) {
    const Tensor& tx = val(check(probs));
    require_rank2("st_hard_one_hot", tx);
    const int R = tx.rows(), C = tx.cols();
    Tensor out({R, C});
    for (int r = 0; r < R; ++r) {
        int arg = 0;
        for (int c = 1; c < C; ++c)
            if (tx.at(r, c) > tx.at(r, arg)) arg = c;
        out.at(r, arg) = 1.0;
    }
    return push(std::move(out), [this, ix = probs.id, id = static_cast<int>(nodes_.size())] {
        const Tensor& go = g(id);
        Tensor& gx = g(ix);
        for (size_t i = 0; i < go.size(); ++i) gx.v[i] += go.v[i];  // straight-through
    });
}

void Graph::backward(Var loss) {
    const int lid = check(loss);
    if (nodes_[lid].val.size() != 1)
        throw DataError("backward: loss must be scalar, got " + nodes_[lid].val.shape_str());
    for (auto& n : nodes_) n.grd = Tensor(n.val.shape);
    nodes_[lid].grd.v[0] = 1.0;
    for (int i = lid; i >= 0; --i)
        if (nodes_[i].back) nodes_[i].back();
    for (auto& n : nodes_) {
        if (!n.bound) continue;
        if (n.bound->grad.size() != n.grd.size()) n.bound->grad = Tensor(n.grd.shape);
        for (size_t i = 0; i < n.grd.size(); ++i) n.bound->grad.v[i] += n.grd.v[i];
    }
}

GradCheckResult grad_check(const std::function<Var(Graph&, const std::vector<Var>&)>& f,
                           const std::vector<Tensor>& point, double eps, int max_coords,
                           Rng* rng) {
    double f0;
    std::vector<Tensor> analytic;
    {
        Graph g;
        std::vector<Var> xs;
        xs.reserve(point.size());
        for (const auto& t : point) xs.push_back(g.input(t));
        const Var y = f(g, xs);
        if (g.value(y).size() != 1) throw DataError("grad_check: f must return a scalar");
        f0 = g.value(y).v[0];
        if (!std::isfinite(f0)) throw NumericError("grad_check: non-finite value at base point");
        g.backward(y);
        for (Var x : xs) analytic.push_back(g.grad(x));
    }

    std::vector<std::pair<int, size_t>> coords;
    for (size_t ti = 0; ti < point.size(); ++ti)
        for (size_t ei = 0; ei < point[ti].size(); ++ei)
            coords.emplace_back(static_cast<int>(ti), ei);
    if (max_coords > 0 && static_cast<int>(coords.size()) > max_coords) {
        if (!rng) throw DataError("grad_check: sampling coordinates requires an rng");
        rng->shuffle(coords);
        coords.resize(max_coords);
    }

    auto eval = [&](int ti, size_t ei, double delta) {
        std::vector<Tensor> p = point;
        p[static_cast<size_t>(ti)].v[ei] += delta;
        Graph g;
        std::vector<Var> xs;
        xs.reserve(p.size());
        for (const auto& t : p) xs.push_back(g.input(t));
        const double r = g.value(f(g, xs)).v[0];
        if (!std::isfinite(r)) throw NumericError("grad_check: non-finite value at perturbed point");
        return r;
    };

    GradCheckResult res;
    for (const auto& [ti, ei] : coords) {
        const double fp = eval(ti, ei, eps);
        const double fm = eval(ti, ei, -eps);
        const double central = (fp - fm) / (2.0 * eps);
        const double fwd = (fp - f0) / eps;
        const double bwd = (f0 - fm) / eps;
        // One-sided slopes disagreeing flags a kink (relu corner, max tie,
        // argmax flip) crossed inside the eps window; skip those coordinates.
        if (std::abs(fwd - bwd) > 1e-2 * std::max(1.0, std::abs(central))) {
            ++res.skipped;
            continue;
        }
        const double rel =
            std::abs(analytic[static_cast<size_t>(ti)].v[ei] - central) / std::max(1.0, std::abs(central));
        res.max_rel_err = std::max(res.max_rel_err, rel);
        ++res.checked;
    }
    return res;
}

}  // namespace fold2seq::tc
