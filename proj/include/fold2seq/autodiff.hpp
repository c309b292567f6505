#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "fold2seq/params.hpp"
#include "fold2seq/tensor.hpp"

namespace fold2seq::tc {

// Handle into a Graph's tape.
struct Var {
    int id = -1;
};

// Reverse-mode tape. Ops append nodes (inputs always precede outputs), so a
// single reverse sweep in creation order is a valid topological order.
// backward() works on fresh per-call scratch gradients and then accumulates
// leaf gradients into their bound ParamTensor, so repeated calls accumulate
// (the documented contract) without double-counting interior nodes.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // leaves
    Var input(Tensor t);                // plain leaf; scratch grad readable after backward()
    Var param(ParamTensor& p);          // leaf bound to persistent storage
    Var constant(Tensor t) { return input(std::move(t)); }

    const Tensor& value(Var x) const { return nodes_[check(x)].val; }
    const Tensor& grad(Var x) const { return nodes_[check(x)].grd; }

    // elementwise & linear algebra
    Var add(Var a, Var b);              // same shape
    Var sub(Var a, Var b);
    Var add_rowvec(Var x, Var b);       // (R,C) + (1,C), broadcast down rows
    Var scale(Var x, double s);
    Var mul(Var a, Var b);              // elementwise, same shape
    Var relu(Var x);
    Var matmul(Var a, Var b);           // (m,k)x(k,n)
    Var matmul_nt(Var a, Var b);        // (m,k)x(n,k)^T -> (m,n)
    Var transpose(Var x);               // rank 2

    // shape plumbing
    Var reshape(Var x, std::vector<int> shape);
    Var slice_cols(Var x, int c0, int c1);
    Var slice_rows(Var x, int r0, int r1);
    Var concat_cols(const std::vector<Var>& xs);
    Var concat_rows(const std::vector<Var>& xs);

    // rows = independent distributions
    Var softmax_rows(Var x);
    Var log_softmax_rows(Var x);
    Var l2_normalize_rows(Var x);       // row / sqrt(|row|^2 + 1e-12)

    // normalization
    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
    // x (C,S): per-channel statistics over S. Training mode uses batch
    // statistics and updates the running tensors in place (biased variance);
    // eval mode is a deterministic affine map of the running statistics.
    Var batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
                   bool training, double momentum = 0.1, double eps = 1e-5);

    // x (Cin,D,H,W), w (Cout, Cin*K^3), b (1,Cout); kernel 3 (default) or 1.
    Var conv3d(Var x, Var w, Var b, int stride, int pad, int kernel = 3);

    // reductions & pooling
    Var avg_pool_cols(Var x, int k);    // kernel k, stride 1, valid
    Var max_over_axis(Var x, int axis); // ties -> first maximal index
    Var mean_over_axis(Var x, int axis);
    Var mean_all(Var x);
    Var sum_all(Var x);
    Var squared_l2(Var x);

    // token plumbing
    Var embedding(Var table, const std::vector<int>& ids);
    // mean of -log softmax(logits)[target] over rows whose target != ignore_index
    Var cross_entropy(Var logits, const std::vector<int>& targets, int ignore_index = -1);
    Var masked_fill(Var x, const std::vector<uint8_t>& mask, double value);
    Var stop_gradient(Var x);
    // forward: one-hot rows at the row argmax; backward: identity (straight-through)
    Var st_hard_one_hot(Var probs);

    void backward(Var loss);

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor val;
        Tensor grd;
        std::function<void()> back;     // may be empty (leaves, stop_gradient)
        ParamTensor* bound = nullptr;
    };

    int check(Var x) const;
    Var push(Tensor val, std::function<void()> back = {}, ParamTensor* bound = nullptr);
    Tensor& g(int id) { return nodes_[id].grd; }
    const Tensor& g(int id) const { return nodes_[id].grd; }
    const Tensor& val(int id) const { return nodes_[id].val; }

    std::vector<Node> nodes_;
};

// Central-difference gradient verification. Evaluates f from scratch per
// perturbation; coordinates where the two one-sided differences disagree
// (kinks, max ties, argmax flips) are skipped and counted. Relative error is
// |analytic - central| / max(1, |central|).
struct GradCheckResult {
    double max_rel_err = 0.0;
    int checked = 0;
    int skipped = 0;
};

GradCheckResult grad_check(const std::function<Var(Graph&, const std::vector<Var>&)>& f,
                           const std::vector<Tensor>& point, double eps = 1e-5,
                           int max_coords = -1, Rng* rng = nullptr);

}  // namespace fold2seq::tc
