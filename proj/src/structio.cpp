#include "fold2seq/structio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fold2seq/common.hpp"

namespace fold2seq::io {

using nlohmann::json;

bool is_natural_aa(char aa) {
    return std::strchr(kAminoAlphabet, aa) != nullptr && aa != '\0';
}

char sse_to_char(Sse s) {
    switch (s) {
        case Sse::Helix: return 'H';
        case Sse::Strand: return 'E';
        case Sse::Loop: return 'L';
        case Sse::BendTurn: return 'T';
    }
    throw DataError("invalid SSE value");
}

Sse sse_from_char(char c) {
    switch (c) {
        case 'H': return Sse::Helix;
        case 'E': return Sse::Strand;
        case 'L': return Sse::Loop;
        case 'T': return Sse::BendTurn;
        default: throw DataError(std::string("unknown SSE symbol '") + c + "'");
    }
}

std::string Structure::sequence() const {
    std::string s;
    s.reserve(residues.size());
    for (const auto& r : residues) s.push_back(r.aa);
    return s;
}

namespace {

Residue residue_from_json(const json& j, int line_no) {
    Residue r;
    try {
        r.index = j.at("i").get<int>();
        r.coord = {j.at("x").get<double>(), j.at("y").get<double>(), j.at("z").get<double>()};
        const std::string sse = j.at("sse").get<std::string>();
        if (sse.size() != 1) throw DataError("unknown SSE \"" + sse + "\" at line " + std::to_string(line_no));
        r.sse = sse_from_char(sse[0]);
        const std::string aa = j.at("aa").get<std::string>();
        if (aa.size() != 1) throw DataError("unknown aa \"" + aa + "\" at line " + std::to_string(line_no));
        r.aa = aa[0];
        if (j.contains("chain")) r.chain = j.at("chain").get<std::string>();
    } catch (const json::exception& e) {
        throw DataError("malformed residue record at line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
        throw DataError(std::string(e.what()) + (std::strstr(e.what(), "line") ? "" : " at line " + std::to_string(line_no)));
    }
    for (double c : r.coord) {
        if (!std::isfinite(c)) throw DataError("non-finite coordinate at line " + std::to_string(line_no));
    }
    return r;
}

}  // namespace

std::vector<Structure> parse_structures(std::istream& in, const std::string& source_name) {
    std::vector<Structure> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(source_name + ": malformed record at line " + std::to_string(line_no) + ": " + e.what());
        }
        Structure s;
        try {
            s.id = j.at("id").get<std::string>();
            s.fold_id = j.at("fold_id").get<std::string>();
            for (const auto& rj : j.at("residues")) s.residues.push_back(residue_from_json(rj, line_no));
        } catch (const json::exception& e) {
            throw DataError(source_name + ": malformed record at line " + std::to_string(line_no) + ": " + e.what());
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Structure> parse_structures(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open structure file: " + path);
    return parse_structures(in, path);
}

std::string structure_to_jsonl(const Structure& s) {
    json j;
    j["id"] = s.id;
    j["fold_id"] = s.fold_id;
    json residues = json::array();
    for (const auto& r : s.residues) {
        json rj;
        rj["i"] = r.index;
        rj["x"] = r.coord[0];
        rj["y"] = r.coord[1];
        rj["z"] = r.coord[2];
        rj["sse"] = std::string(1, sse_to_char(r.sse));
        rj["aa"] = std::string(1, r.aa);
        if (!r.chain.empty()) rj["chain"] = r.chain;
        residues.push_back(std::move(rj));
    }
    j["residues"] = std::move(residues);
    return j.dump();
}

void serialize_structures(const std::vector<Structure>& structures, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open output file: " + path);
    for (const auto& s : structures) out << structure_to_jsonl(s) << '\n';
}

bool passes_filter(const Structure& s) {
    const int n = s.length();
    if (n < 1 || n > kMaxLength) return false;
    std::set<std::string> chains;
    for (int i = 0; i < n; ++i) {
        const Residue& r = s.residues[i];
        if (!is_natural_aa(r.aa)) return false;
        if (r.index != i + 1) return false;  // any index gap counts as non-contiguous
        chains.insert(r.chain);
    }
    return chains.size() <= 1;
}

std::vector<Structure> filter_corpus(const std::vector<Structure>& structures) {
    std::vector<Structure> out;
    for (const auto& s : structures) {
        if (passes_filter(s)) out.push_back(s);
    }
    return out;
}

namespace {

// round-half-up count with at least one element per held-out bucket
size_t bucket_size(size_t n, double ratio) {
    const auto r = static_cast<size_t>(std::llround(static_cast<double>(n) * ratio));
    return std::max<size_t>(1, r);
}

}  // namespace

DatasetSplit split_dataset(const std::vector<Structure>& structures, uint64_t seed,
                           std::array<double, 3> ratios) {
    DatasetSplit split;
    split.seed = seed;
    split.ratios = ratios;

    for (const auto& s : structures) {
        if (s.fold_id.empty()) throw DataError("structure '" + s.id + "' is missing fold_id");
        split.fold_index[s.fold_id].push_back(s.id);
    }
    if (split.fold_index.size() < 4) throw DataError("insufficient folds: need >= 4, have " +
                                                     std::to_string(split.fold_index.size()));

    // Sorted fold list shuffled by seed, so the split does not depend on file order.
    std::vector<std::string> folds;
    for (const auto& [fold, ids] : split.fold_index) folds.push_back(fold);
    std::sort(folds.begin(), folds.end());
    Rng rng(seed);
    rng.shuffle(folds);

    const size_t n_folds = folds.size();
    const size_t n_c = bucket_size(n_folds, ratios[2]);
    const size_t n_b = bucket_size(n_folds, ratios[1]);
    if (n_b + n_c >= n_folds) throw DataError("insufficient folds: split leaves no training folds");

    std::set<std::string> folds_c(folds.begin(), folds.begin() + n_c);
    std::set<std::string> folds_b(folds.begin() + n_c, folds.begin() + n_c + n_b);

    std::vector<std::string> ids_a;
    for (const auto& s : structures) {
        if (folds_c.count(s.fold_id)) {
            split.test_od.push_back(s.id);
        } else if (folds_b.count(s.fold_id)) {
            split.valid.push_back(s.id);
        } else {
            ids_a.push_back(s.id);
        }
    }

    // Structure-level split of (a), again over a sorted list.
    std::sort(ids_a.begin(), ids_a.end());
    Rng rng2(derive_seed(seed, 1));
    rng2.shuffle(ids_a);
    const size_t n_a = ids_a.size();
    const size_t n_a3 = std::min(bucket_size(n_a, ratios[2]), n_a > 2 ? n_a - 2 : size_t{0});
    const size_t n_a2 = std::min(bucket_size(n_a, ratios[1]), n_a > n_a3 + 1 ? n_a - n_a3 - 1 : size_t{0});
    if (n_a3 == 0 || n_a2 == 0) throw DataError("too few structures in the training folds to split");

    std::vector<std::string> a3(ids_a.begin(), ids_a.begin() + n_a3);
    std::vector<std::string> a2(ids_a.begin() + n_a3, ids_a.begin() + n_a3 + n_a2);
    std::vector<std::string> a1(ids_a.begin() + n_a3 + n_a2, ids_a.end());

    // Restore corpus order inside each partition for stable output.
    std::set<std::string> set_a1(a1.begin(), a1.end()), set_a2(a2.begin(), a2.end()), set_a3(a3.begin(), a3.end());
    for (const auto& s : structures) {
        if (set_a1.count(s.id)) split.train.push_back(s.id);
        if (set_a2.count(s.id)) split.valid.push_back(s.id);
        if (set_a3.count(s.id)) split.test_id.push_back(s.id);
    }
    return split;
}

void save_split(const DatasetSplit& split, const std::string& path) {
    json j;
    j["train"] = split.train;
    j["valid"] = split.valid;
    j["test_id"] = split.test_id;
    j["test_od"] = split.test_od;
    j["seed"] = split.seed;
    j["ratios"] = split.ratios;
    j["fold_index"] = split.fold_index;
    std::ofstream out(path);
    if (!out) throw DataError("cannot open output file: " + path);
    out << j.dump(2) << '\n';
}

DatasetSplit load_split(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open split file: " + path);
    json j;
    try {
        in >> j;
        DatasetSplit split;
        split.train = j.at("train").get<std::vector<std::string>>();
        split.valid = j.at("valid").get<std::vector<std::string>>();
        split.test_id = j.at("test_id").get<std::vector<std::string>>();
        split.test_od = j.at("test_od").get<std::vector<std::string>>();
        split.seed = j.at("seed").get<uint64_t>();
        split.ratios = j.at("ratios").get<std::array<double, 3>>();
        if (j.contains("fold_index"))
            split.fold_index = j.at("fold_index").get<std::map<std::string, std::vector<std::string>>>();
        return split;
    } catch (const json::exception& e) {
        throw DataError("malformed split file " + path + ": " + e.what());
    }
}

}  // namespace fold2seq::io
