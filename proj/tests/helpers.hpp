#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "fold2seq/common.hpp"
#include "fold2seq/structio.hpp"
#include "fold2seq/voxel.hpp"

namespace testutil {

using fold2seq::Rng;
using fold2seq::io::Residue;
using fold2seq::io::Sse;
using fold2seq::io::Structure;

// Random structure with coordinates in [-spread, spread]^3.
inline Structure random_structure(Rng& rng, int n, double spread = 15.0,
                                  const std::string& id = "s", const std::string& fold = "f") {
    Structure s;
    s.id = id;
    s.fold_id = fold;
    const char* alphabet = fold2seq::io::kAminoAlphabet;
    for (int i = 0; i < n; ++i) {
        Residue r;
        r.index = i + 1;
        for (int k = 0; k < 3; ++k) r.coord[k] = rng.uniform(-spread, spread);
        r.sse = static_cast<Sse>(rng.below(4));
        r.aa = alphabet[rng.below(20)];
        s.residues.push_back(r);
    }
    return s;
}

inline std::string write_tmp(const std::string& name, const std::string& content) {
    std::ofstream out(name);
    out << content;
    return name;
}

// Reference voxelizer: plain double loop over residues and all voxels, no
// truncation. Slow but obviously correct.
inline fold2seq::voxel::VoxelGrid naive_voxelize(const Structure& s, double sigma) {
    fold2seq::voxel::VoxelGrid g;
    for (int x = 0; x < fold2seq::voxel::kGridN; ++x) {
        for (int y = 0; y < fold2seq::voxel::kGridN; ++y) {
            for (int z = 0; z < fold2seq::voxel::kGridN; ++z) {
                const double vx = fold2seq::voxel::voxel_center(x);
                const double vy = fold2seq::voxel::voxel_center(y);
                const double vz = fold2seq::voxel::voxel_center(z);
                for (const auto& r : s.residues) {
                    const double dx = r.coord[0] - vx;
                    const double dy = r.coord[1] - vy;
                    const double dz = r.coord[2] - vz;
                    const double d2 = dx * dx + dy * dy + dz * dz;
                    g.at(x, y, z, static_cast<int>(r.sse)) += std::exp(-d2 / (sigma * sigma));
                }
            }
        }
    }
    return g;
}

inline std::vector<std::vector<double>> distance_matrix(const Structure& s) {
    const int n = s.length();
    std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k) {
                const double diff = s.residues[i].coord[k] - s.residues[j].coord[k];
                acc += diff * diff;
            }
            d[i][j] = std::sqrt(acc);
        }
    }
    return d;
}

}  // namespace testutil
