#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "fold2seq/common.hpp"
#include "fold2seq/structio.hpp"
#include "helpers.hpp"

using namespace fold2seq;
using namespace fold2seq::io;

namespace {

Structure make_chain(const std::string& id, const std::string& fold, int n, char aa = 'A') {
    Structure s;
    s.id = id;
    s.fold_id = fold;
    for (int i = 0; i < n; ++i) {
        Residue r;
        r.index = i + 1;
        r.coord = {static_cast<double>(i), 0.0, 0.0};
        r.sse = Sse::Helix;
        r.aa = aa;
        s.residues.push_back(r);
    }
    return s;
}

}  // namespace

TEST_SUITE("structio") {

TEST_CASE("jsonl round trip preserves every field") {
    Rng rng(11);
    auto s = testutil::random_structure(rng, 12, 10.0, "prot1", "foldA");
    s.residues[3].chain = "B";

    std::istringstream in(structure_to_jsonl(s) + "\n");
    const auto parsed = parse_structures(in, "mem");
    REQUIRE(parsed.size() == 1);
    const auto& p = parsed[0];
    CHECK(p.id == s.id);
    CHECK(p.fold_id == s.fold_id);
    REQUIRE(p.length() == s.length());
    for (int i = 0; i < s.length(); ++i) {
        CHECK(p.residues[i].index == s.residues[i].index);
        CHECK(p.residues[i].sse == s.residues[i].sse);
        CHECK(p.residues[i].aa == s.residues[i].aa);
        CHECK(p.residues[i].chain == s.residues[i].chain);
        for (int k = 0; k < 3; ++k)
            CHECK(p.residues[i].coord[k] == doctest::Approx(s.residues[i].coord[k]).epsilon(1e-12));
    }
}

TEST_CASE("malformed records are rejected with the offending line") {
    std::istringstream in(
        "{\"id\":\"a\",\"fold_id\":\"f\",\"residues\":[{\"i\":1,\"x\":0,\"y\":0,\"z\":0,\"sse\":\"H\",\"aa\":\"A\"}]}\n"
        "{this is not json\n");
    try {
        parse_structures(in, "mem");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("unknown SSE symbol is rejected") {
    std::istringstream in(
        "{\"id\":\"a\",\"fold_id\":\"f\",\"residues\":[{\"i\":1,\"x\":0,\"y\":0,\"z\":0,\"sse\":\"Q\",\"aa\":\"A\"}]}\n");
    CHECK_THROWS_AS(parse_structures(in, "mem"), DataError);
}

TEST_CASE("missing required key is rejected") {
    std::istringstream in("{\"id\":\"a\",\"residues\":[]}\n");
    CHECK_THROWS_AS(parse_structures(in, "mem"), DataError);
}

TEST_CASE("blank lines are skipped") {
    std::istringstream in(
        "\n{\"id\":\"a\",\"fold_id\":\"f\",\"residues\":[{\"i\":1,\"x\":0,\"y\":0,\"z\":0,\"sse\":\"L\",\"aa\":\"G\"}]}\n\n");
    CHECK(parse_structures(in, "mem").size() == 1);
}

TEST_CASE("filter keeps the inclusive length-200 boundary") {
    const auto ok = make_chain("a", "f", kMaxLength);
    const auto too_long = make_chain("b", "f", kMaxLength + 1);
    CHECK(passes_filter(ok));
    CHECK_FALSE(passes_filter(too_long));
}

TEST_CASE("filter drops non-natural residues") {
    auto s = make_chain("a", "f", 5);
    s.residues[2].aa = 'X';
    CHECK_FALSE(passes_filter(s));
    s.residues[2].aa = 'B';
    CHECK_FALSE(passes_filter(s));
    s.residues[2].aa = 'W';
    CHECK(passes_filter(s));
}

TEST_CASE("filter drops index gaps and multi-chain structures") {
    auto gap = make_chain("a", "f", 4);
    gap.residues[2].index = 4;  // 1,2,4,4
    CHECK_FALSE(passes_filter(gap));

    auto multi = make_chain("b", "f", 4);
    multi.residues[0].chain = "A";
    multi.residues[1].chain = "B";
    CHECK_FALSE(passes_filter(multi));

    auto single_named = make_chain("c", "f", 4);
    for (auto& r : single_named.residues) r.chain = "A";
    CHECK(passes_filter(single_named));

    CHECK_FALSE(passes_filter(Structure{"d", "f", {}}));  // empty
}

TEST_CASE("filter_corpus is order-stable") {
    std::vector<Structure> corpus{make_chain("a", "f", 3), make_chain("b", "f", kMaxLength + 1),
                                  make_chain("c", "f", 4)};
    const auto kept = filter_corpus(corpus);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].id == "a");
    CHECK(kept[1].id == "c");
}

TEST_CASE("split: 40 folds at default ratios gives 38/1/1 fold buckets") {
    std::vector<Structure> corpus;
    for (int f = 0; f < 40; ++f) {
        for (int m = 0; m < 5; ++m) {
            corpus.push_back(make_chain("s" + std::to_string(f) + "_" + std::to_string(m),
                                        "fold" + std::to_string(f), 6));
        }
    }
    const auto split = split_dataset(corpus, 7);

    auto folds_of = [&](const std::vector<std::string>& ids) {
        std::set<std::string> out;
        for (const auto& id : ids) {
            for (const auto& s : corpus)
                if (s.id == id) out.insert(s.fold_id);
        }
        return out;
    };
    const auto od_folds = folds_of(split.test_od);
    CHECK(od_folds.size() == 1);

    // OD folds never leak into any other partition.
    std::set<std::string> rest_folds;
    for (const auto* part : {&split.train, &split.valid, &split.test_id}) {
        const auto f = folds_of(*part);
        rest_folds.insert(f.begin(), f.end());
    }
    for (const auto& f : od_folds) CHECK(rest_folds.count(f) == 0);
    CHECK(rest_folds.size() + od_folds.size() == 40);

    // Partitions are disjoint and jointly cover the corpus.
    std::set<std::string> all;
    size_t total = 0;
    for (const auto* part : {&split.train, &split.valid, &split.test_id, &split.test_od}) {
        all.insert(part->begin(), part->end());
        total += part->size();
    }
    CHECK(all.size() == corpus.size());
    CHECK(total == corpus.size());

    // 38 train folds x 5 = 190 structures in (a); 5 to test_id, 5 to valid.
    CHECK(split.test_id.size() == 5);
    CHECK(split.train.size() == 180);
}

TEST_CASE("split is deterministic in the seed") {
    std::vector<Structure> corpus;
    for (int f = 0; f < 10; ++f)
        for (int m = 0; m < 3; ++m)
            corpus.push_back(make_chain("s" + std::to_string(f) + "_" + std::to_string(m),
                                        "fold" + std::to_string(f), 5));
    const auto a = split_dataset(corpus, 42);
    const auto b = split_dataset(corpus, 42);
    CHECK(a.train == b.train);
    CHECK(a.valid == b.valid);
    CHECK(a.test_id == b.test_id);
    CHECK(a.test_od == b.test_od);

    // Different seeds almost surely split differently.
    bool any_differs = false;
    for (uint64_t seed = 0; seed < 5 && !any_differs; ++seed) {
        const auto c = split_dataset(corpus, seed);
        any_differs = c.train != a.train || c.test_od != a.test_od;
    }
    CHECK(any_differs);
}

TEST_CASE("split rejects fewer than 4 folds and missing fold ids") {
    std::vector<Structure> corpus{make_chain("a", "f1", 3), make_chain("b", "f2", 3),
                                  make_chain("c", "f3", 3)};
    CHECK_THROWS_WITH_AS(split_dataset(corpus, 1), doctest::Contains("insufficient folds"),
                         DataError);

    corpus.push_back(make_chain("d", "", 3));
    CHECK_THROWS_AS(split_dataset(corpus, 1), DataError);
}

TEST_CASE("split manifest round trips through disk") {
    std::vector<Structure> corpus;
    for (int f = 0; f < 8; ++f)
        for (int m = 0; m < 4; ++m)
            corpus.push_back(make_chain("s" + std::to_string(f) + "_" + std::to_string(m),
                                        "fold" + std::to_string(f), 5));
    const auto split = split_dataset(corpus, 99);
    save_split(split, "split_roundtrip.json");
    const auto loaded = load_split("split_roundtrip.json");
    CHECK(loaded.train == split.train);
    CHECK(loaded.valid == split.valid);
    CHECK(loaded.test_id == split.test_id);
    CHECK(loaded.test_od == split.test_od);
    CHECK(loaded.seed == split.seed);
    CHECK(loaded.ratios == split.ratios);
    CHECK(loaded.fold_index == split.fold_index);
}

TEST_CASE("file round trip via serialize_structures") {
    Rng rng(5);
    std::vector<Structure> corpus{testutil::random_structure(rng, 8, 12.0, "p1", "f1"),
                                  testutil::random_structure(rng, 3, 12.0, "p2", "f2")};
    serialize_structures(corpus, "structio_roundtrip.jsonl");
    const auto loaded = parse_structures("structio_roundtrip.jsonl");
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].sequence() == corpus[0].sequence());
    CHECK(loaded[1].sequence() == corpus[1].sequence());
    CHECK(loaded[0].fold_id == "f1");
}

}  // TEST_SUITE
