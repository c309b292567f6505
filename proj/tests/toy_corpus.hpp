#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "fold2seq/structio.hpp"

// 8 synthetic structure/sequence pairs in 2 folds. "alpha" structures are
// helical spirals (SSE Helix), "beta" structures extended zigzags (SSE
// Strand). Geometry varies strongly within each fold (turn count, pitch,
// aspect) so the grids stay distinct after canonical orientation and
// rescaling, and every sequence uses its own disjoint residue alphabet with
// a unique first residue, so the pairs are unambiguous memorization targets.
namespace testutil {

inline fold2seq::io::Structure toy_helix(const std::string& id, const std::string& seq,
                                         double radius, double rise, double phase) {
    fold2seq::io::Structure s;
    s.id = id;
    s.fold_id = "alpha";
    for (size_t i = 0; i < seq.size(); ++i) {
        fold2seq::io::Residue r;
        r.index = static_cast<int>(i) + 1;
        const double a = 1.745 * static_cast<double>(i) + phase;  // ~100 deg per residue
        r.coord = {radius * std::cos(a), radius * std::sin(a),
                   rise * static_cast<double>(i)};
        r.sse = fold2seq::io::Sse::Helix;
        r.aa = seq[i];
        r.chain = "A";
        s.residues.push_back(r);
    }
    return s;
}

// Strand-flavoured structure over explicit backbone points. The four beta
// members use intrinsically different shapes (flat zigzag, hairpin, arc,
// wedge) because per-axis rescaling plus canonical orientation collapses any
// single zigzag's spacing/amplitude/twist parameters to the same grid.
inline fold2seq::io::Structure toy_strand(const std::string& id, const std::string& seq,
                                          const std::vector<std::array<double, 3>>& pts) {
    fold2seq::io::Structure s;
    s.id = id;
    s.fold_id = "beta";
    for (size_t i = 0; i < seq.size(); ++i) {
        fold2seq::io::Residue r;
        r.index = static_cast<int>(i) + 1;
        r.coord = pts[i];
        r.sse = fold2seq::io::Sse::Strand;
        r.aa = seq[i];
        r.chain = "A";
        s.residues.push_back(r);
    }
    return s;
}

inline std::vector<std::array<double, 3>> zigzag_points(size_t n) {
    std::vector<std::array<double, 3>> pts;
    for (size_t i = 0; i < n; ++i)
        pts.push_back({3.3 * static_cast<double>(i), i % 2 == 0 ? 0.9 : -0.9, 0.0});
    return pts;
}

inline std::vector<std::array<double, 3>> hairpin_points(size_t n) {
    std::vector<std::array<double, 3>> pts;  // out along +x, back on a parallel strand
    for (size_t i = 0; i < n; ++i) {
        const double along = i < n / 2 ? static_cast<double>(i) : static_cast<double>(n - 1 - i);
        pts.push_back({3.5 * along, i % 2 == 0 ? 1.0 : -1.0, i < n / 2 ? 0.0 : 4.5});
    }
    return pts;
}

inline std::vector<std::array<double, 3>> arc_points(size_t n) {
    std::vector<std::array<double, 3>> pts;  // quarter-circle strand
    for (size_t i = 0; i < n; ++i) {
        const double a = 1.5707963 * static_cast<double>(i) / static_cast<double>(n - 1);
        pts.push_back({12.0 * std::cos(a), 12.0 * std::sin(a), i % 2 == 0 ? 0.8 : -0.8});
    }
    return pts;
}

inline std::vector<std::array<double, 3>> wedge_points(size_t n) {
    std::vector<std::array<double, 3>> pts;  // zigzag whose amplitude fans out
    for (size_t i = 0; i < n; ++i) {
        const double amp = 0.4 + 0.35 * static_cast<double>(i);
        pts.push_back({3.4 * static_cast<double>(i), i % 2 == 0 ? amp : -amp, 0.0});
    }
    return pts;
}

inline std::vector<fold2seq::io::Structure> toy_corpus() {
    return {
        toy_helix("alpha1", "AELKAELKAE", 2.3, 1.50, 0.0),
        toy_helix("alpha2", "MQMQMQMQMQMQ", 2.3, 0.85, 0.4),
        toy_helix("alpha3", "RNRNRNRNRN", 3.6, 1.90, 0.9),
        toy_helix("alpha4", "HDHDHDHDHDHD", 1.6, 0.65, 1.3),
        toy_strand("beta1", "VIVIVIVIVI", zigzag_points(10)),
        toy_strand("beta2", "TYTYTYTYTYTY", hairpin_points(12)),
        toy_strand("beta3", "FWFWFWFWFW", arc_points(10)),
        toy_strand("beta4", "SGSGSGSGSGSG", wedge_points(12)),
    };
}

}  // namespace testutil
