#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace fold2seq::io {

// Secondary-structure classes, in the fixed channel order used everywhere.
enum class Sse : uint8_t { Helix = 0, Strand = 1, Loop = 2, BendTurn = 3 };

constexpr int kNumSseClasses = 4;

// The 20 natural amino acids, alphabetical.
inline constexpr const char* kAminoAlphabet = "ACDEFGHIKLMNPQRSTVWY";

bool is_natural_aa(char aa);
char sse_to_char(Sse s);          // H / E / L / T
Sse sse_from_char(char c);        // throws DataError on unknown symbol

struct Residue {
    int index = 0;                 // 1-based position in the chain
    std::array<double, 3> coord{}; // C-alpha position, Angstrom
    Sse sse = Sse::Loop;
    char aa = 'A';
    std::string chain;             // optional; empty means single/unspecified chain
};

struct Structure {
    std::string id;
    std::string fold_id;
    std::vector<Residue> residues;

    int length() const { return static_cast<int>(residues.size()); }
    std::string sequence() const;
};

constexpr int kMaxLength = 200;

struct DatasetSplit {
    std::vector<std::string> train;    // (a1)
    std::vector<std::string> valid;    // (b) + (a2)
    std::vector<std::string> test_id;  // (a3)
    std::vector<std::string> test_od;  // (c)
    uint64_t seed = 0;
    std::array<double, 3> ratios{0.95, 0.025, 0.025};
    std::map<std::string, std::vector<std::string>> fold_index;  // fold_id -> member ids
};

// One JSON object per line:
// {"id": str, "fold_id": str, "residues":
//   [{"i": int, "x": f64, "y": f64, "z": f64, "sse": "H|E|L|T", "aa": "A..Y", "chain": str?}]}
std::vector<Structure> parse_structures(const std::string& path);
std::vector<Structure> parse_structures(std::istream& in, const std::string& source_name);
void serialize_structures(const std::vector<Structure>& structures, const std::string& path);
std::string structure_to_jsonl(const Structure& s);

// Drops structures longer than kMaxLength, with non-natural residues, or
// flagged multi-chain / non-contiguous in residue index. Order-stable, total.
std::vector<Structure> filter_corpus(const std::vector<Structure>& structures);

bool passes_filter(const Structure& s);

// Fold-level split into (a)/(b)/(c) per ratios, then structure-level split of
// (a) into (a1)/(a2)/(a3) with the same ratios. train=(a1), valid=(b)+(a2),
// test_id=(a3), test_od=(c). Deterministic in the seed; requires >= 4 folds.
DatasetSplit split_dataset(const std::vector<Structure>& structures, uint64_t seed,
                           std::array<double, 3> ratios = {0.95, 0.025, 0.025});

void save_split(const DatasetSplit& split, const std::string& path);
DatasetSplit load_split(const std::string& path);

}  // namespace fold2seq::io
