#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fold2seq/cli.hpp"
#include "fold2seq/structio.hpp"
#include "fold2seq/voxel.hpp"
#include "toy_corpus.hpp"

using namespace fold2seq;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_cli(const std::vector<std::string>& args) {
    std::vector<std::string> full = {"fold2seq"};
    full.insert(full.end(), args.begin(), args.end());
    std::vector<char*> argv;
    argv.reserve(full.size());
    for (auto& a : full) argv.push_back(a.data());
    return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// Unique per-case scratch directory, removed on scope exit.
struct Scratch {
    fs::path dir;
    explicit Scratch(const std::string& tag)
        : dir(fs::temp_directory_path() / ("fold2seq_cli_" + tag)) {
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Scratch() { fs::remove_all(dir); }
    std::string operator/(const std::string& leaf) const { return (dir / leaf).string(); }
};

std::string write_toy_corpus(const Scratch& s) {
    const std::string path = s / "toy.jsonl";
    io::serialize_structures(testutil::toy_corpus(), path);
    return path;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("voxelize writes grids plus run records") {
    Scratch s("voxelize");
    const std::string corpus = write_toy_corpus(s);
    const std::string out = s / "grids";
    CHECK(run_cli({"voxelize", "--in", corpus, "--out", out, "--sigma", "2.0"}) == 0);

    for (const auto& st : testutil::toy_corpus()) {
        voxel::GridSidecar meta;
        const voxel::VoxelGrid g = voxel::load_grid(out + "/" + st.id + ".f2sgrid", &meta);
        CHECK(meta.id == st.id);
        CHECK(meta.sigma == 2.0);
        CHECK(g.data.size() == static_cast<size_t>(voxel::kGridN) * voxel::kGridN *
                                   voxel::kGridN * voxel::kChannels);
    }
    const json prov = json::parse(slurp(fs::path(out) / "provenance.json"));
    CHECK(prov.at("config_hash").get<std::string>().size() == 16);
    CHECK(prov.at("formats").contains("grid"));
    const json resolved = json::parse(slurp(fs::path(out) / "config.resolved.json"));
    CHECK(resolved.at("sigma").get<double>() == 2.0);
}

TEST_CASE("config file fills defaults and flags beat the file") {
    Scratch s("config");
    const std::string corpus = write_toy_corpus(s);
    const std::string cfg_path = s / "cfg.json";
    {
        std::ofstream cfg(cfg_path);
        cfg << json{{"sigma", 3.0}, {"in", corpus}}.dump();
    }
    const std::string out1 = s / "g1";
    // --in comes from the config file; sigma too.
    CHECK(run_cli({"voxelize", "--config", cfg_path, "--out", out1}) == 0);
    CHECK(json::parse(slurp(fs::path(out1) / "config.resolved.json")).at("sigma") == 3.0);

    const std::string out2 = s / "g2";
    // The explicit flag wins over the config value.
    CHECK(run_cli({"voxelize", "--config", cfg_path, "--out", out2, "--sigma", "1.5"}) == 0);
    CHECK(json::parse(slurp(fs::path(out2) / "config.resolved.json")).at("sigma") == 1.5);

    // FOLD2SEQ_CONFIG supplies the config path when --config is absent.
    setenv("FOLD2SEQ_CONFIG", cfg_path.c_str(), 1);
    const std::string out3 = s / "g3";
    CHECK(run_cli({"voxelize", "--out", out3}) == 0);
    unsetenv("FOLD2SEQ_CONFIG");
    CHECK(json::parse(slurp(fs::path(out3) / "config.resolved.json")).at("sigma") == 3.0);
}

TEST_CASE("usage and data errors map to exit codes 1 and 2") {
    Scratch s("exitcodes");
    CHECK(run_cli({"voxelize", "--bogus", "1"}) == 1);       // unknown flag
    CHECK(run_cli({}) == 1);                                 // missing subcommand
    CHECK(run_cli({"no-such-command"}) == 1);                // unknown subcommand
    CHECK(run_cli({"voxelize"}) == 2);                       // missing required paths
    CHECK(run_cli({"voxelize", "--in", s / "missing.jsonl", "--out", s / "g"}) == 2);
    CHECK(run_cli({"evaluate", "--metric", "bogus", "--in", s / "x", "--out", s / "y"}) == 2);
}

TEST_CASE("train, generate determinism, evaluate, and embeddings") {
    Scratch s("pipeline");
    const std::string corpus = write_toy_corpus(s);
    const std::string run = s / "run";
    CHECK(run_cli({"train", "--in", corpus, "--out", run, "--d", "8", "--layers", "1", "--heads",
                   "2", "--max-len", "20", "--epochs1", "2", "--epochs2", "2", "--warmup", "10",
                   "--seed", "5", "--no-early-stop"}) == 0);
    const std::string ckpt = run + "/checkpoint.f2sckpt";
    CHECK(fs::exists(ckpt));
    CHECK(fs::exists(run + "/train_log.csv"));
    CHECK(fs::exists(run + "/curve.json"));
    {
        std::ifstream log(run + "/train_log.csv");
        std::string header;
        std::getline(log, header);
        CHECK(header == "step,stage,epoch,total,re,cs,fc,cy,lambda5,lr");
        std::string first;
        std::getline(log, first);
        CHECK(first.rfind("1,stage1,", 0) == 0);
    }
    const json curve = json::parse(slurp(run + "/curve.json"));
    REQUIRE(curve.size() == 2);  // two stages
    CHECK(curve[0].at("epochs").size() == 2);

    const std::string grids = s / "grids";
    CHECK(run_cli({"voxelize", "--in", corpus, "--out", grids}) == 0);

    const auto gen_args = [&](const std::string& out) {
        std::vector<std::string> a = {"generate", "--checkpoint", ckpt, "--out", out,
                                      "--k",      "5",            "--n", "2",     "--seed", "9"};
        for (const auto& st : testutil::toy_corpus()) {
            a.push_back("--grid");
            a.push_back(grids + "/" + st.id + ".f2sgrid");
        }
        return a;
    };
    CHECK(run_cli(gen_args(s / "gen1/out.fasta")) == 0);
    CHECK(run_cli(gen_args(s / "gen2/out.fasta")) == 0);
    CHECK(slurp(s / "gen1/out.fasta") == slurp(s / "gen2/out.fasta"));  // byte-identical
    const json manifest = json::parse(slurp(s / "gen1/manifest.json"));
    CHECK(manifest.size() == 8);
    CHECK(manifest.at("alpha1") == json::array({"sample_1", "sample_2"}));

    // Perfect generations: each native sequence echoed back scores sr = 100
    // and full coverage.
    const std::string perfect = s / "perfect.fasta";
    {
        std::ofstream f(perfect);
        for (const auto& st : testutil::toy_corpus())
            f << ">" << st.id << " sample_1\n" << st.sequence() << "\n";
    }
    CHECK(run_cli({"evaluate", "--metric", "sr", "--in", corpus, "--generated", perfect, "--out",
                   s / "sr.json"}) == 0);
    const json sr = json::parse(slurp(s / "sr.json"));
    CHECK(sr.at("sr_fold").at("mean").get<double>() == 100.0);
    CHECK(sr.at("sr_fold").at("per_fold").size() == 2);

    // Coverage uses only the representative's samples (first member with
    // generations), so full coverage needs every member's sequence there.
    const std::string covering = s / "covering.fasta";
    {
        std::ofstream f(covering);
        int n_alpha = 0, n_beta = 0;
        for (const auto& st : testutil::toy_corpus()) {
            const bool alpha = st.fold_id == "alpha";
            const std::string rep = alpha ? "alpha1" : "beta1";
            int& n = alpha ? n_alpha : n_beta;
            f << ">" << rep << " sample_" << ++n << "\n" << st.sequence() << "\n";
        }
    }
    CHECK(run_cli({"evaluate", "--metric", "cov", "--in", corpus, "--generated", covering,
                   "--threshold", "0.30", "--out", s / "cov.json"}) == 0);
    CHECK(json::parse(slurp(s / "cov.json")).at("cov_fold").at("mean").get<double>() == 1.0);

    CHECK(run_cli({"evaluate", "--metric", "ppl", "--in", corpus, "--checkpoint", ckpt, "--out",
                   s / "ppl.json"}) == 0);
    const json ppl = json::parse(slurp(s / "ppl.json"));
    CHECK(ppl.at("ppl_fold").at("mean").get<double>() > 1.0);
    CHECK(ppl.contains("ppl_structure"));

    CHECK(run_cli({"dump-embeddings", "--checkpoint", ckpt, "--in", corpus, "--out",
                   s / "emb.tsv"}) == 0);
    const std::string tsv = slurp(s / "emb.tsv");
    CHECK(tsv.rfind("id\tfold_id\te0", 0) == 0);
    CHECK(tsv.find("# within_fold_mean_pairwise_l2\t") != std::string::npos);
    int lines = 0;
    for (char c : tsv)
        if (c == '\n') ++lines;
    CHECK(lines == 1 + 8 + 1);  // header + rows + footer
}

TEST_CASE("tr evaluation reads the documented TM TSV keying") {
    Scratch s("tr");
    const std::string corpus = write_toy_corpus(s);
    const std::string fasta = s / "gen.fasta";
    {
        std::ofstream f(fasta);
        for (const auto& st : testutil::toy_corpus())
            f << ">" << st.id << " sample_1\n" << st.sequence() << "\n";
    }
    std::ostringstream tm;
    for (const auto& g : testutil::toy_corpus())
        for (const auto& k : testutil::toy_corpus())
            tm << g.id << "/sample_1\t" << k.id << "\t" << (g.fold_id == k.fold_id ? 0.8 : 0.2)
               << "\n";
    const std::string tm_path = s / "tm.tsv";
    {
        std::ofstream f(tm_path);
        f << tm.str();
    }
    CHECK(run_cli({"evaluate", "--metric", "tr", "--in", corpus, "--generated", fasta, "--tm",
                   tm_path, "--out", s / "tr.json"}) == 0);
    const json rep = json::parse(slurp(s / "tr.json"));
    CHECK(rep.at("tr_fold").at("mean").get<double>() == 0.8);
}

TEST_CASE("amsi reduces to self-identity on identical sets") {
    Scratch s("amsi");
    const std::string corpus = write_toy_corpus(s);
    CHECK(run_cli({"amsi", "--test", corpus, "--train", corpus, "--out", s / "amsi.json"}) == 0);
    const json rep = json::parse(slurp(s / "amsi.json"));
    CHECK(rep.at("amsi").get<double>() == 100.0);
    CHECK(rep.at("n_test").get<int>() == 8);
}

TEST_CASE("compare-strategies writes the appendix report") {
    Scratch s("compare");
    const std::string corpus = write_toy_corpus(s);
    CHECK(run_cli({"compare-strategies", "--in", corpus, "--out", s / "cmp.json", "--d", "8",
                   "--layers", "1", "--heads", "2", "--max-len", "20", "--epochs1", "2", "--warmup",
                   "10", "--seed", "3"}) == 0);
    const json rep = json::parse(slurp(s / "cmp.json"));
    CHECK(rep.at("epochs").get<int>() == 2);
    CHECK(rep.at("one_stage").at("valid_RE_f").size() == 2);
    CHECK(rep.at("two_stage").at("valid_RE_f").size() == 2);
    CHECK(rep.at("one_stage").contains("final_valid_ppl"));
    CHECK(rep.at("two_stage").contains("final_valid_RE_f"));
}

}  // TEST_SUITE("cli")
