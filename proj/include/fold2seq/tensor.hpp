#pragma once

#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fold2seq/common.hpp"

namespace fold2seq::tc {

// Dense row-major tensor of doubles. Rank is the shape's length; most ops
// work on rank 2, conv3d interprets rank 4 as (channels, depth, height, width).
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0)
        : shape(std::move(s)), v(static_cast<size_t>(count(shape)), fill) {}

    static long long count(const std::vector<int>& s) {
        long long n = 1;
        for (int e : s) {
            if (e < 0) throw DataError("negative tensor extent");
            n *= e;
        }
        return n;
    }

    size_t size() const { return v.size(); }

    int rows() const { return shape.size() == 2 ? shape[0] : (shape.size() == 1 ? 1 : -1); }
    int cols() const { return shape.size() == 2 ? shape[1] : (shape.size() == 1 ? shape[0] : -1); }

    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << '(';
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << ')';
        return os.str();
    }

    static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape); }

    static Tensor from_rows(int r, int c, std::vector<double> data) {
        Tensor t;
        t.shape = {r, c};
        if (static_cast<long long>(data.size()) != static_cast<long long>(r) * c)
            throw DataError("from_rows: data size does not match " + t.shape_str());
        t.v = std::move(data);
        return t;
    }
};

}  // namespace fold2seq::tc
