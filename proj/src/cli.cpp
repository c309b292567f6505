#include "fold2seq/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fold2seq/common.hpp"
#include "fold2seq/metrics.hpp"
#include "fold2seq/model.hpp"
#include "fold2seq/sampler.hpp"
#include "fold2seq/structio.hpp"
#include "fold2seq/trainer.hpp"
#include "fold2seq/voxel.hpp"

namespace fold2seq::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config(const std::string& explicit_path) {
    std::string path = explicit_path;
    if (path.empty()) {
        if (const char* env = std::getenv("FOLD2SEQ_CONFIG")) path = env;
    }
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file: " + path);
    try {
        json j;
        in >> j;
        if (!j.is_object()) throw DataError("config file must hold a JSON object: " + path);
        return j;
    } catch (const json::exception& e) {
        throw DataError("malformed config file " + path + ": " + e.what());
    }
}

// Config file beats defaults, flags beat the config file.
template <typename T>
void resolve(const CLI::App& cmd, const std::string& flag, const json& cfg, const std::string& key,
             T& value) {
    if (cmd.count(flag) == 0 && cfg.contains(key)) {
        try {
            value = cfg.at(key).get<T>();
        } catch (const json::exception& e) {
            throw DataError("bad config value for \"" + key + "\": " + e.what());
        }
    }
}

// Every run echoes its resolved config and a provenance record into out_dir.
void write_run_records(const fs::path& out_dir, const json& resolved, uint64_t seed) {
    fs::create_directories(out_dir);
    {
        std::ofstream f(out_dir / "config.resolved.json");
        f << resolved.dump(2) << '\n';
    }
    std::ostringstream hash;
    hash << std::hex << std::setw(16) << std::setfill('0') << fnv1a(resolved.dump());
    json prov;
    prov["seed"] = seed;
    prov["config_hash"] = hash.str();
    prov["formats"] =
        json{{"grid", voxel::kGridFormatVersion}, {"checkpoint", 1}, {"structure_jsonl", 1}, {"split", 1}};
    std::ofstream f(out_dir / "provenance.json");
    f << prov.dump(2) << '\n';
}

voxel::VoxelConfig make_voxel_config(double sigma, const std::string& scaling,
                                     const std::string& orientation) {
    voxel::VoxelConfig cfg;
    cfg.sigma = sigma;
    cfg.scaling_mode = voxel::scaling_mode_from_string(scaling);
    cfg.orientation_mode = voxel::orientation_mode_from_string(orientation);
    return cfg;
}

json voxel_config_json(const voxel::VoxelConfig& v) {
    return json{{"sigma", v.sigma},
                {"scaling",
                 v.scaling_mode == voxel::ScalingMode::PerAxis ? "per_axis" : "isotropic"},
                {"orientation", v.orientation_mode == voxel::OrientationMode::FirstResidueNegZ
                                    ? "first_residue_neg_z"
                                    : "principal_axes"}};
}

voxel::VoxelConfig voxel_config_from_json(const json& j) {
    return make_voxel_config(j.at("sigma").get<double>(), j.at("scaling").get<std::string>(),
                             j.at("orientation").get<std::string>());
}

// Checkpoint round trip: the meta block carries everything needed to rebuild
// the model (config, fold labels, voxel settings) without the training corpus.
void save_model_checkpoint(const std::string& path, model::ModelParams& params,
                           const std::map<std::string, int>& labels,
                           const voxel::VoxelConfig& vcfg, uint64_t seed,
                           const std::string& strategy) {
    std::map<std::string, std::string> meta;
    meta["model_config"] = params.cfg.to_json_string();
    meta["labels"] = json(labels).dump();
    meta["voxel"] = voxel_config_json(vcfg).dump();
    meta["seed"] = std::to_string(seed);
    meta["strategy"] = strategy;
    tc::save_checkpoint(path, params.store, meta);
}

struct LoadedModel {
    model::ModelParams params;
    std::map<std::string, int> labels;
    voxel::VoxelConfig voxel;
};

LoadedModel load_model_checkpoint(const std::string& path) {
    const auto meta = tc::read_checkpoint_meta(path);
    const auto need = [&](const std::string& key) -> const std::string& {
        const auto it = meta.find(key);
        if (it == meta.end()) throw DataError("checkpoint " + path + " lacks meta key " + key);
        return it->second;
    };
    const model::ModelConfig mcfg = model::ModelConfig::from_json_string(need("model_config"));
    Rng rng(0);  // shapes only; values are overwritten by the strict load
    LoadedModel lm{model::ModelParams::init(mcfg, rng), {}, {}};
    tc::load_checkpoint(path, lm.params.store);
    try {
        lm.labels = json::parse(need("labels")).get<std::map<std::string, int>>();
        lm.voxel = voxel_config_from_json(json::parse(need("voxel")));
    } catch (const json::exception& e) {
        throw DataError("checkpoint " + path + " has malformed meta: " + e.what());
    }
    return lm;
}

// Orient -> rescale -> voxelize, the same pipeline the trainer uses.
voxel::VoxelGrid grid_for_structure(const io::Structure& s, const voxel::VoxelConfig& vcfg) {
    const auto oriented = voxel::canonical_orient(s, vcfg.orientation_mode);
    const auto scaled = voxel::rescale(oriented, vcfg);
    return voxel::voxelize(scaled.structure, vcfg);
}

struct FastaRecord {
    std::string condition_id;  // first header token
    std::string sample_name;   // second header token ("sample_3")
    std::string seq;
};

// Parses the generate output format: ">condition_id sample_n" + one sequence.
std::vector<FastaRecord> parse_fasta(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open FASTA file: " + path);
    std::vector<FastaRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '>') {
            std::istringstream fields(line.substr(1));
            FastaRecord rec;
            if (!(fields >> rec.condition_id))
                throw DataError("fasta: line " + std::to_string(lineno) + " has an empty header");
            if (!(fields >> rec.sample_name))
                rec.sample_name = "sample_" + std::to_string(out.size() + 1);
            out.push_back(std::move(rec));
        } else {
            if (out.empty())
                throw DataError("fasta: line " + std::to_string(lineno) +
                                " holds sequence data before any header");
            out.back().seq += line;
        }
    }
    if (out.empty()) throw DataError("fasta: no records in " + path);
    for (const auto& r : out)
        if (r.seq.empty())
            throw DataError("fasta: record " + r.condition_id + " " + r.sample_name +
                            " has no sequence");
    return out;
}

std::map<std::string, std::vector<io::Structure>> group_by_fold(
    const std::vector<io::Structure>& structures) {
    std::map<std::string, std::vector<io::Structure>> folds;
    for (const auto& s : structures) folds[s.fold_id].push_back(s);
    return folds;
}

int cmd_voxelize(const CLI::App& cmd, const std::string& config_path, const std::string& in_path,
                 const std::string& out_dir, double sigma, std::string scaling,
                 std::string orientation) {
    const json cfg = load_config(config_path);
    std::string in = in_path, out = out_dir;
    resolve(cmd, "--in", cfg, "in", in);
    resolve(cmd, "--out", cfg, "out", out);
    resolve(cmd, "--sigma", cfg, "sigma", sigma);
    resolve(cmd, "--scaling", cfg, "scaling", scaling);
    resolve(cmd, "--orientation", cfg, "orientation", orientation);
    if (in.empty() || out.empty()) throw DataError("voxelize requires --in and --out");

    const auto vcfg = make_voxel_config(sigma, scaling, orientation);
    const auto structures = io::parse_structures(in);
    json resolved{{"in", in},       {"out", out},
                  {"sigma", sigma}, {"scaling", scaling},
                  {"orientation", orientation}};
    write_run_records(out, resolved, 0);

    for (const auto& s : structures) {
        const auto oriented = voxel::canonical_orient(s, vcfg.orientation_mode);
        const auto scaled = voxel::rescale(oriented, vcfg);
        const auto grid = voxel::voxelize(scaled.structure, vcfg);
        voxel::GridSidecar meta{s.id, scaled.ratio, vcfg.sigma, vcfg.scaling_mode,
                                vcfg.orientation_mode};
        voxel::save_grid(grid, meta, (fs::path(out) / (s.id + ".f2sgrid")).string());
    }
    std::cout << "voxelized " << structures.size() << " structures into " << out << '\n';
    return 0;
}

int cmd_augment(const CLI::App& cmd, const std::string& config_path, const std::string& in_path,
                const std::string& out_path, std::string orientation) {
    const json cfg = load_config(config_path);
    std::string in = in_path, out = out_path;
    resolve(cmd, "--in", cfg, "in", in);
    resolve(cmd, "--out", cfg, "out", out);
    resolve(cmd, "--orientation", cfg, "orientation", orientation);
    if (in.empty() || out.empty()) throw DataError("augment requires --in and --out");

    const auto mode = voxel::orientation_mode_from_string(orientation);
    const auto structures = io::parse_structures(in);
    std::vector<io::Structure> augmented;
    augmented.reserve(structures.size() * 10);
    for (const auto& s : structures) {
        auto oriented = voxel::canonical_orient(s, mode);
        auto variants = voxel::augment_rotations(oriented);
        augmented.push_back(std::move(oriented));
        for (auto& v : variants) augmented.push_back(std::move(v));
    }
    io::serialize_structures(augmented, out);

    const fs::path out_dir = fs::path(out).has_parent_path() ? fs::path(out).parent_path() : ".";
    write_run_records(out_dir, json{{"in", in}, {"out", out}, {"orientation", orientation}}, 0);
    std::cout << "wrote " << augmented.size() << " structures (oriented + 9 rotations each) to "
              << out << '\n';
    return 0;
}

int cmd_split(const CLI::App& cmd, const std::string& config_path, const std::string& in_path,
              const std::string& out_path, uint64_t seed) {
    const json cfg = load_config(config_path);
    std::string in = in_path, out = out_path;
    resolve(cmd, "--in", cfg, "in", in);
    resolve(cmd, "--out", cfg, "out", out);
    resolve(cmd, "--seed", cfg, "seed", seed);
    if (in.empty() || out.empty()) throw DataError("split requires --in and --out");

    const auto structures = io::filter_corpus(io::parse_structures(in));
    const auto split = io::split_dataset(structures, seed);
    io::save_split(split, out);

    const fs::path out_dir = fs::path(out).has_parent_path() ? fs::path(out).parent_path() : ".";
    write_run_records(out_dir, json{{"in", in}, {"out", out}, {"seed", seed}}, seed);
    std::cout << "split " << structures.size() << " structures: train=" << split.train.size()
              << " valid=" << split.valid.size() << " test_id=" << split.test_id.size()
              << " test_od=" << split.test_od.size() << '\n';
    return 0;
}

struct TrainFlags {
    std::string config, in, valid, out;
    std::string strategy = "two_stage";
    int d = 32, layers = 2, heads = 4, max_len = 200;
    int epochs1 = 20, epochs2 = 20;
    int batch = 8, warmup = 100, patience = 10;
    uint64_t seed = 1;
    double sigma = 2.0;
    std::string scaling = "per_axis", orientation = "first_residue_neg_z";
    bool augment = false, no_early_stop = false, reinit_decoder = false;
    bool clamp_lambda5 = false, straight_through_cy = false;
    bool no_cs = false, no_fc = false, no_cy = false, no_re_s = false;
};

int cmd_train(const CLI::App& cmd, TrainFlags f) {
    const json cfg = load_config(f.config);
    resolve(cmd, "--in", cfg, "in", f.in);
    resolve(cmd, "--valid", cfg, "valid", f.valid);
    resolve(cmd, "--out", cfg, "out", f.out);
    resolve(cmd, "--strategy", cfg, "strategy", f.strategy);
    resolve(cmd, "--d", cfg, "d", f.d);
    resolve(cmd, "--layers", cfg, "layers", f.layers);
    resolve(cmd, "--heads", cfg, "heads", f.heads);
    resolve(cmd, "--max-len", cfg, "max_len", f.max_len);
    resolve(cmd, "--epochs1", cfg, "epochs1", f.epochs1);
    resolve(cmd, "--epochs2", cfg, "epochs2", f.epochs2);
    resolve(cmd, "--batch", cfg, "batch", f.batch);
    resolve(cmd, "--warmup", cfg, "warmup", f.warmup);
    resolve(cmd, "--patience", cfg, "patience", f.patience);
    resolve(cmd, "--seed", cfg, "seed", f.seed);
    resolve(cmd, "--sigma", cfg, "sigma", f.sigma);
    resolve(cmd, "--scaling", cfg, "scaling", f.scaling);
    resolve(cmd, "--orientation", cfg, "orientation", f.orientation);
    if (f.in.empty() || f.out.empty()) throw DataError("train requires --in and --out");
    if (f.strategy != "two_stage" && f.strategy != "one_stage")
        throw DataError("train: --strategy must be two_stage or one_stage");

    const auto vcfg = make_voxel_config(f.sigma, f.scaling, f.orientation);
    const auto corpus = io::filter_corpus(io::parse_structures(f.in));
    const auto labels = train::fold_label_map(corpus);

    model::ModelConfig mcfg;
    mcfg.d = f.d;
    mcfg.n_layers = f.layers;
    mcfg.n_heads = f.heads;
    mcfg.n_s = f.max_len;
    mcfg.n_folds = static_cast<int>(labels.size());
    mcfg.validate();

    train::TrainConfig tcfg;
    tcfg.batch_size = f.batch;
    tcfg.warmup = f.warmup;
    tcfg.seed = f.seed;
    tcfg.patience = f.patience;
    tcfg.early_stop = !f.no_early_stop;
    tcfg.augment = f.augment;
    tcfg.clamp_lambda5 = f.clamp_lambda5;
    tcfg.straight_through_cy = f.straight_through_cy;
    tcfg.reinit_decoder = f.reinit_decoder;
    tcfg.flags = {!f.no_re_s, !f.no_cs, !f.no_fc, !f.no_cy};
    tcfg.voxel = vcfg;

    const auto train_items = train::build_items(corpus, labels, vcfg, true, f.augment);
    std::vector<train::TrainItem> valid_items;
    if (f.valid.empty()) {
        valid_items = train::build_items(corpus, labels, vcfg, true, false);
    } else {
        const auto vcorpus = io::filter_corpus(io::parse_structures(f.valid));
        valid_items = train::build_items(vcorpus, labels, vcfg, true, false);
    }

    Rng init_rng(f.seed);
    model::ModelParams params = model::ModelParams::init(mcfg, init_rng);

    std::vector<train::TrainResult> results;
    if (f.strategy == "two_stage") {
        train::TrainConfig c1 = tcfg;
        c1.max_epochs = f.epochs1;
        results.push_back(train::train_stage1(std::move(params), train_items, valid_items, c1));
        train::TrainConfig c2 = tcfg;
        c2.max_epochs = f.epochs2;
        results.push_back(
            train::train_stage2(std::move(results.back().params), train_items, valid_items, c2));
    } else {
        train::TrainConfig c1 = tcfg;
        c1.max_epochs = f.epochs1;
        results.push_back(train::train_joint(std::move(params), train_items, valid_items, c1));
    }
    model::ModelParams final_params = std::move(results.back().params);

    fs::create_directories(f.out);
    const std::string ckpt = (fs::path(f.out) / "checkpoint.f2sckpt").string();
    save_model_checkpoint(ckpt, final_params, labels, vcfg, f.seed, f.strategy);
    {
        std::ofstream log(fs::path(f.out) / "train_log.csv");
        log << "step,stage,epoch,total,re,cs,fc,cy,lambda5,lr\n";
        for (const auto& r : results)
            for (const auto& line : r.metrics_log) log << line << '\n';
    }
    {
        json curve = json::array();
        for (const auto& r : results) {
            json stage_curve = json::array();
            for (const auto& e : r.curve)
                stage_curve.push_back(json{{"epoch", e.epoch},
                                           {"lambda5", e.lambda5},
                                           {"train_total", e.train_total},
                                           {"valid_total", e.valid_total},
                                           {"train_re", e.train_re},
                                           {"valid_re", e.valid_re}});
            curve.push_back(json{{"best_valid", r.best_valid},
                                 {"best_epoch", r.best_epoch},
                                 {"epochs", stage_curve}});
        }
        std::ofstream c(fs::path(f.out) / "curve.json");
        c << curve.dump(2) << '\n';
    }

    json resolved{{"in", f.in},
                  {"valid", f.valid.empty() ? "(train)" : f.valid},
                  {"out", f.out},
                  {"strategy", f.strategy},
                  {"d", f.d},
                  {"layers", f.layers},
                  {"heads", f.heads},
                  {"max_len", f.max_len},
                  {"epochs1", f.epochs1},
                  {"epochs2", f.epochs2},
                  {"batch", f.batch},
                  {"warmup", f.warmup},
                  {"patience", f.patience},
                  {"seed", f.seed},
                  {"augment", f.augment},
                  {"early_stop", !f.no_early_stop},
                  {"reinit_decoder", f.reinit_decoder},
                  {"clamp_lambda5", f.clamp_lambda5},
                  {"straight_through_cy", f.straight_through_cy},
                  {"use_re_s", !f.no_re_s},
                  {"use_cs", !f.no_cs},
                  {"use_fc", !f.no_fc},
                  {"use_cy", !f.no_cy},
                  {"voxel", voxel_config_json(vcfg)}};
    write_run_records(f.out, resolved, f.seed);

    std::cout << "trained " << f.strategy << " on " << corpus.size() << " structures ("
              << labels.size() << " folds); best_valid=" << results.back().best_valid
              << " at epoch " << results.back().best_epoch << "; checkpoint " << ckpt << '\n';
    return 0;
}

int cmd_generate(const CLI::App& cmd, const std::string& config_path, std::string checkpoint,
                 std::vector<std::string> grid_paths, std::string out_path, int k, int n,
                 int max_len, double temperature, uint64_t seed) {
    const json cfg = load_config(config_path);
    resolve(cmd, "--checkpoint", cfg, "checkpoint", checkpoint);
    resolve(cmd, "--grid", cfg, "grid", grid_paths);
    resolve(cmd, "--out", cfg, "out", out_path);
    resolve(cmd, "--k", cfg, "k", k);
    resolve(cmd, "--n", cfg, "n", n);
    resolve(cmd, "--max-len", cfg, "max_len", max_len);
    resolve(cmd, "--temperature", cfg, "temperature", temperature);
    resolve(cmd, "--seed", cfg, "seed", seed);
    if (checkpoint.empty() || grid_paths.empty() || out_path.empty())
        throw DataError("generate requires --checkpoint, --grid, and --out");

    LoadedModel lm = load_model_checkpoint(checkpoint);
    sampler::SampleConfig scfg;
    scfg.k = k;
    scfg.num_samples = n;
    scfg.max_len = max_len;
    scfg.temperature = temperature;
    scfg.seed = seed;
    scfg.validate(lm.params.cfg);

    std::string fasta;
    std::vector<std::pair<std::string, std::vector<std::string>>> sets;
    for (const std::string& gp : grid_paths) {
        voxel::GridSidecar meta;
        const voxel::VoxelGrid grid = voxel::load_grid(gp, &meta);
        const tc::Tensor memory = sampler::fold_latent(lm.params, grid);
        const std::vector<std::string> seqs = sampler::sample_set(lm.params, memory, scfg);
        fasta += sampler::to_fasta(meta.id, seqs);
        std::vector<std::string> names;
        for (size_t i = 0; i < seqs.size(); ++i) names.push_back("sample_" + std::to_string(i + 1));
        sets.emplace_back(meta.id, std::move(names));
    }
    const fs::path out_dir =
        fs::path(out_path).has_parent_path() ? fs::path(out_path).parent_path() : ".";
    fs::create_directories(out_dir);
    {
        std::ofstream f(out_path);
        if (!f) throw DataError("cannot open output FASTA: " + out_path);
        f << fasta;
    }
    {
        std::ofstream m(out_dir / "manifest.json");
        m << sampler::manifest_json(sets) << '\n';
    }
    json resolved{{"checkpoint", checkpoint}, {"grid", grid_paths},
                  {"out", out_path},          {"k", k},
                  {"n", n},                   {"max_len", max_len},
                  {"temperature", temperature}, {"seed", seed}};
    write_run_records(out_dir, resolved, seed);
    std::cout << "generated " << n << " samples for " << grid_paths.size() << " conditions into "
              << out_path << '\n';
    return 0;
}

int cmd_evaluate(const CLI::App& cmd, const std::string& config_path, std::string metric,
                 std::string in_path, std::string generated_path, std::string checkpoint,
                 std::string tm_path, std::string out_path, double threshold) {
    const json cfg = load_config(config_path);
    resolve(cmd, "--metric", cfg, "metric", metric);
    resolve(cmd, "--in", cfg, "in", in_path);
    resolve(cmd, "--generated", cfg, "generated", generated_path);
    resolve(cmd, "--checkpoint", cfg, "checkpoint", checkpoint);
    resolve(cmd, "--tm", cfg, "tm", tm_path);
    resolve(cmd, "--out", cfg, "out", out_path);
    resolve(cmd, "--threshold", cfg, "threshold", threshold);
    if (metric.empty() || in_path.empty() || out_path.empty())
        throw DataError("evaluate requires --metric, --in, and --out");

    const auto natives = io::parse_structures(in_path);
    const auto folds = group_by_fold(natives);
    std::map<std::string, metrics::MetricSummary> report;

    // Generated sequences grouped by the condition id in the FASTA header.
    std::map<std::string, std::vector<std::string>> gen_seqs;
    std::map<std::string, std::vector<std::string>> gen_names;  // "<id>/<sample>" for TM lookups
    if (!generated_path.empty()) {
        for (const auto& rec : parse_fasta(generated_path)) {
            gen_seqs[rec.condition_id].push_back(rec.seq);
            gen_names[rec.condition_id].push_back(rec.condition_id + "/" + rec.sample_name);
        }
    }

    if (metric == "sr") {
        if (generated_path.empty()) throw DataError("evaluate sr requires --generated");
        std::map<std::string, double> per_fold;
        for (const auto& [fold_id, members] : folds) {
            std::vector<metrics::NativeEntry> entries;
            for (const auto& s : members) entries.push_back({s.id, s.sequence()});
            per_fold[fold_id] = metrics::sr_fold(entries, gen_seqs);
        }
        report["sr_fold"] = metrics::summarize(per_fold);
    } else if (metric == "cov") {
        if (generated_path.empty()) throw DataError("evaluate cov requires --generated");
        std::map<std::string, double> per_fold;
        for (const auto& [fold_id, members] : folds) {
            std::vector<metrics::NativeEntry> entries;
            for (const auto& s : members) entries.push_back({s.id, s.sequence()});
            // Representative: first member (by id order) that has samples.
            std::string rep;
            for (const auto& e : entries)
                if (gen_seqs.count(e.id)) {
                    rep = e.id;
                    break;
                }
            if (rep.empty())
                throw DataError("evaluate cov: no generated sequences for any member of fold " +
                                fold_id);
            per_fold[fold_id] = metrics::cov_fold(entries, rep, gen_seqs.at(rep), threshold);
        }
        report["cov_fold"] = metrics::summarize(per_fold);
    } else if (metric == "tr") {
        if (generated_path.empty() || tm_path.empty())
            throw DataError("evaluate tr requires --generated and --tm");
        std::ifstream tf(tm_path);
        if (!tf) throw DataError("cannot open TM table: " + tm_path);
        std::stringstream buf;
        buf << tf.rdbuf();
        const metrics::TmTable tm = metrics::parse_tm_tsv(buf.str());
        std::map<std::string, double> per_fold;
        for (const auto& [fold_id, members] : folds) {
            std::vector<std::string> ids;
            for (const auto& s : members) ids.push_back(s.id);
            per_fold[fold_id] = metrics::tr_fold(ids, gen_names, tm);
        }
        report["tr_fold"] = metrics::summarize(per_fold);
    } else if (metric == "ppl") {
        if (checkpoint.empty()) throw DataError("evaluate ppl requires --checkpoint");
        LoadedModel lm = load_model_checkpoint(checkpoint);
        std::map<std::string, double> per_fold, per_fold_self;
        for (const auto& [fold_id, members] : folds) {
            std::vector<std::string> ids;
            std::map<std::string, int> lengths;
            std::map<std::string, std::vector<int>> tokens;
            std::map<std::string, tc::Tensor> memory;
            for (const auto& s : members) {
                ids.push_back(s.id);
                lengths[s.id] = s.length();
                tokens[s.id] = model::encode_sequence(s.sequence());
                memory.emplace(s.id, sampler::fold_latent(lm.params, grid_for_structure(s, lm.voxel)));
            }
            metrics::LogLikTable ll;
            std::vector<double> self;
            std::vector<int> self_lens;
            for (const auto& j : ids) {
                for (const auto& k : ids) {
                    const double v =
                        model::sequence_loglik(lm.params, memory.at(j), tokens.at(k));
                    ll.set(j, k, v);
                    if (j == k) {
                        self.push_back(v);
                        self_lens.push_back(lengths.at(k));
                    }
                }
            }
            per_fold[fold_id] = metrics::ppl_fold(ids, ll, lengths);
            per_fold_self[fold_id] = metrics::ppl_structure(self, self_lens);
        }
        report["ppl_fold"] = metrics::summarize(per_fold);
        report["ppl_structure"] = metrics::summarize(per_fold_self);
    } else {
        throw DataError("evaluate: unknown metric " + metric + " (expected ppl|sr|cov|tr)");
    }

    const std::string js = metrics::report_json(report);
    const fs::path out_dir =
        fs::path(out_path).has_parent_path() ? fs::path(out_path).parent_path() : ".";
    fs::create_directories(out_dir);
    {
        std::ofstream f(out_path);
        if (!f) throw DataError("cannot open report path: " + out_path);
        f << js << '\n';
    }
    json resolved{{"metric", metric},          {"in", in_path}, {"generated", generated_path},
                  {"checkpoint", checkpoint},  {"tm", tm_path}, {"threshold", threshold},
                  {"out", out_path}};
    write_run_records(out_dir, resolved, 0);
    std::cout << js << '\n';
    return 0;
}

int cmd_amsi(const CLI::App& cmd, const std::string& config_path, std::string test_path,
             std::string train_path, std::string out_path) {
    const json cfg = load_config(config_path);
    resolve(cmd, "--test", cfg, "test", test_path);
    resolve(cmd, "--train", cfg, "train", train_path);
    resolve(cmd, "--out", cfg, "out", out_path);
    if (test_path.empty() || train_path.empty()) throw DataError("amsi requires --test and --train");

    std::vector<std::string> test_seqs, train_seqs;
    for (const auto& s : io::parse_structures(test_path)) test_seqs.push_back(s.sequence());
    for (const auto& s : io::parse_structures(train_path)) train_seqs.push_back(s.sequence());
    const double v = metrics::amsi(test_seqs, train_seqs);

    json out{{"amsi", v},
             {"n_test", test_seqs.size()},
             {"n_train", train_seqs.size()}};
    if (!out_path.empty()) {
        const fs::path out_dir =
            fs::path(out_path).has_parent_path() ? fs::path(out_path).parent_path() : ".";
        fs::create_directories(out_dir);
        std::ofstream f(out_path);
        if (!f) throw DataError("cannot open report path: " + out_path);
        f << out.dump(2) << '\n';
        write_run_records(out_dir, json{{"test", test_path}, {"train", train_path}, {"out", out_path}},
                          0);
    }
    std::cout << out.dump(2) << '\n';
    return 0;
}

int cmd_compare(const CLI::App& cmd, const std::string& config_path, TrainFlags f) {
    const json cfg = load_config(config_path);
    resolve(cmd, "--in", cfg, "in", f.in);
    resolve(cmd, "--valid", cfg, "valid", f.valid);
    resolve(cmd, "--out", cfg, "out", f.out);
    resolve(cmd, "--d", cfg, "d", f.d);
    resolve(cmd, "--layers", cfg, "layers", f.layers);
    resolve(cmd, "--heads", cfg, "heads", f.heads);
    resolve(cmd, "--max-len", cfg, "max_len", f.max_len);
    resolve(cmd, "--epochs1", cfg, "epochs1", f.epochs1);
    resolve(cmd, "--batch", cfg, "batch", f.batch);
    resolve(cmd, "--warmup", cfg, "warmup", f.warmup);
    resolve(cmd, "--seed", cfg, "seed", f.seed);
    resolve(cmd, "--sigma", cfg, "sigma", f.sigma);
    resolve(cmd, "--scaling", cfg, "scaling", f.scaling);
    resolve(cmd, "--orientation", cfg, "orientation", f.orientation);
    if (f.in.empty() || f.out.empty()) throw DataError("compare-strategies requires --in and --out");

    const auto vcfg = make_voxel_config(f.sigma, f.scaling, f.orientation);
    const auto corpus = io::filter_corpus(io::parse_structures(f.in));
    const auto labels = train::fold_label_map(corpus);

    model::ModelConfig mcfg;
    mcfg.d = f.d;
    mcfg.n_layers = f.layers;
    mcfg.n_heads = f.heads;
    mcfg.n_s = f.max_len;
    mcfg.n_folds = static_cast<int>(labels.size());
    mcfg.validate();

    train::TrainConfig tcfg;
    tcfg.batch_size = f.batch;
    tcfg.max_epochs = f.epochs1;
    tcfg.warmup = f.warmup;
    tcfg.seed = f.seed;
    tcfg.augment = f.augment;
    tcfg.voxel = vcfg;

    const auto train_items = train::build_items(corpus, labels, vcfg, true, f.augment);
    std::vector<train::TrainItem> valid_items;
    if (f.valid.empty()) {
        valid_items = train::build_items(corpus, labels, vcfg, true, false);
    } else {
        const auto vcorpus = io::filter_corpus(io::parse_structures(f.valid));
        valid_items = train::build_items(vcorpus, labels, vcfg, true, false);
    }

    const train::CompareReport rep = train::compare_strategies(mcfg, train_items, valid_items, tcfg);

    const fs::path out_dir =
        fs::path(f.out).has_parent_path() ? fs::path(f.out).parent_path() : ".";
    fs::create_directories(out_dir);
    {
        std::ofstream out(f.out);
        if (!out) throw DataError("cannot open report path: " + f.out);
        out << rep.to_json() << '\n';
    }
    write_run_records(out_dir,
                      json{{"in", f.in},
                           {"valid", f.valid.empty() ? "(train)" : f.valid},
                           {"out", f.out},
                           {"d", f.d},
                           {"layers", f.layers},
                           {"heads", f.heads},
                           {"max_len", f.max_len},
                           {"epochs", f.epochs1},
                           {"batch", f.batch},
                           {"warmup", f.warmup},
                           {"seed", f.seed},
                           {"augment", f.augment},
                           {"voxel", voxel_config_json(vcfg)}},
                      f.seed);
    std::cout << "one_stage final RE_f=" << rep.one_stage_final_valid_re
              << "  two_stage final RE_f=" << rep.two_stage_final_valid_re << "  report " << f.out
              << '\n';
    return 0;
}

int cmd_dump_embeddings(const CLI::App& cmd, const std::string& config_path, std::string checkpoint,
                        std::string in_path, std::string out_path) {
    const json cfg = load_config(config_path);
    resolve(cmd, "--checkpoint", cfg, "checkpoint", checkpoint);
    resolve(cmd, "--in", cfg, "in", in_path);
    resolve(cmd, "--out", cfg, "out", out_path);
    if (checkpoint.empty() || in_path.empty() || out_path.empty())
        throw DataError("dump-embeddings requires --checkpoint, --in, and --out");

    LoadedModel lm = load_model_checkpoint(checkpoint);
    const auto structures = io::parse_structures(in_path);
    std::vector<metrics::EmbeddingRow> rows;
    for (const auto& s : structures) {
        const tc::Tensor memory = sampler::fold_latent(lm.params, grid_for_structure(s, lm.voxel));
        rows.push_back(metrics::mean_pool_latent(s.id, s.fold_id, memory));
    }
    metrics::embedding_dump(rows, out_path);

    const fs::path out_dir =
        fs::path(out_path).has_parent_path() ? fs::path(out_path).parent_path() : ".";
    write_run_records(out_dir, json{{"checkpoint", checkpoint}, {"in", in_path}, {"out", out_path}},
                      0);
    std::cout << "dumped " << rows.size() << " fold embeddings to " << out_path << '\n';
    return 0;
}

}  // namespace

int run(int argc, char** argv) {
    CLI::App app{"fold2seq: fold-conditioned protein sequence design"};
    app.require_subcommand(1);

    // voxelize
    auto* vox = app.add_subcommand("voxelize", "render structures into SSE density grids");
    std::string vox_config, vox_in, vox_out, vox_scaling = "per_axis",
                vox_orientation = "first_residue_neg_z";
    double vox_sigma = 2.0;
    vox->add_option("--config", vox_config, "JSON config file");
    vox->add_option("--in", vox_in, "input structures (JSONL)");
    vox->add_option("--out", vox_out, "output directory for grid files");
    vox->add_option("--sigma", vox_sigma, "Gaussian width in Angstrom");
    vox->add_option("--scaling", vox_scaling, "per_axis | isotropic");
    vox->add_option("--orientation", vox_orientation, "first_residue_neg_z | principal_axes");

    // augment
    auto* aug = app.add_subcommand("augment", "emit oriented structures plus 9 axis rotations");
    std::string aug_config, aug_in, aug_out, aug_orientation = "first_residue_neg_z";
    aug->add_option("--config", aug_config, "JSON config file");
    aug->add_option("--in", aug_in, "input structures (JSONL)");
    aug->add_option("--out", aug_out, "output structures (JSONL)");
    aug->add_option("--orientation", aug_orientation, "first_residue_neg_z | principal_axes");

    // split
    auto* spl = app.add_subcommand("split", "deterministic fold-level dataset split");
    std::string spl_config, spl_in, spl_out;
    uint64_t spl_seed = 0;
    spl->add_option("--config", spl_config, "JSON config file");
    spl->add_option("--in", spl_in, "input structures (JSONL)");
    spl->add_option("--out", spl_out, "output split manifest (JSON)");
    spl->add_option("--seed", spl_seed, "split seed");

    // train
    auto* trn = app.add_subcommand("train", "train the joint fold/sequence model");
    TrainFlags tf;
    trn->add_option("--config", tf.config, "JSON config file");
    trn->add_option("--in", tf.in, "training structures (JSONL)");
    trn->add_option("--valid", tf.valid, "validation structures (JSONL; default: train set)");
    trn->add_option("--out", tf.out, "output directory (checkpoint, logs, curves)");
    trn->add_option("--strategy", tf.strategy, "two_stage | one_stage");
    trn->add_option("--d", tf.d, "model width");
    trn->add_option("--layers", tf.layers, "transformer layers per block");
    trn->add_option("--heads", tf.heads, "attention heads");
    trn->add_option("--max-len", tf.max_len, "max sequence length n_s");
    trn->add_option("--epochs1", tf.epochs1, "max epochs for stage 1 (or the single stage)");
    trn->add_option("--epochs2", tf.epochs2, "max epochs for stage 2");
    trn->add_option("--batch", tf.batch, "gradient accumulation group size");
    trn->add_option("--warmup", tf.warmup, "lr warmup steps");
    trn->add_option("--patience", tf.patience, "early-stop patience (epochs)");
    trn->add_option("--seed", tf.seed, "training seed");
    trn->add_option("--sigma", tf.sigma, "voxel Gaussian width");
    trn->add_option("--scaling", tf.scaling, "per_axis | isotropic");
    trn->add_option("--orientation", tf.orientation, "first_residue_neg_z | principal_axes");
    trn->add_flag("--augment", tf.augment, "train on the 9 rotation grids too");
    trn->add_flag("--no-early-stop", tf.no_early_stop, "run all epochs");
    trn->add_flag("--reinit-decoder", tf.reinit_decoder, "stage 2 restarts the decoder");
    trn->add_flag("--clamp-lambda5", tf.clamp_lambda5, "cap the cyclic-loss weight at 1");
    trn->add_flag("--straight-through-cy", tf.straight_through_cy,
                  "straight-through cyclic gradient");
    trn->add_flag("--no-re-s", tf.no_re_s, "ablation: drop the stage-1 sequence RE term");
    trn->add_flag("--no-cs", tf.no_cs, "ablation: drop the cosine similarity loss");
    trn->add_flag("--no-fc", tf.no_fc, "ablation: drop the fold classification losses");
    trn->add_flag("--no-cy", tf.no_cy, "ablation: drop the cyclic loss");

    // generate
    auto* gen = app.add_subcommand("generate", "sample sequences conditioned on fold grids");
    std::string gen_config, gen_checkpoint, gen_out;
    std::vector<std::string> gen_grids;
    int gen_k = 5, gen_n = 1, gen_max_len = 0;
    double gen_temperature = 1.0;
    uint64_t gen_seed = 1;
    gen->add_option("--config", gen_config, "JSON config file");
    gen->add_option("--checkpoint", gen_checkpoint, "trained model checkpoint");
    gen->add_option("--grid", gen_grids, "fold grid file(s) (.f2sgrid)");
    gen->add_option("--out", gen_out, "output FASTA path");
    gen->add_option("--k", gen_k, "top-k cutoff");
    gen->add_option("--n", gen_n, "samples per condition");
    gen->add_option("--max-len", gen_max_len, "max generation length (0: model n_s)");
    gen->add_option("--temperature", gen_temperature, "softmax temperature");
    gen->add_option("--seed", gen_seed, "sampling seed");

    // evaluate
    auto* eva = app.add_subcommand("evaluate", "fold-level metrics over natives + generations");
    std::string eva_config, eva_metric, eva_in, eva_generated, eva_checkpoint, eva_tm, eva_out;
    double eva_threshold = 0.30;
    eva->add_option("--config", eva_config, "JSON config file");
    eva->add_option("--metric", eva_metric, "ppl | sr | cov | tr");
    eva->add_option("--in", eva_in, "native structures (JSONL, fold ids set)");
    eva->add_option("--generated", eva_generated, "generated FASTA (headers: id sample_n)");
    eva->add_option("--checkpoint", eva_checkpoint, "checkpoint (ppl only)");
    eva->add_option("--tm", eva_tm, "TM-score TSV: <id>/<sample> <tab> native_id <tab> tm");
    eva->add_option("--out", eva_out, "output report JSON");
    eva->add_option("--threshold", eva_threshold, "coverage identity threshold");

    // amsi
    auto* ams = app.add_subcommand("amsi", "max sequence identity of test against train");
    std::string ams_config, ams_test, ams_train, ams_out;
    ams->add_option("--config", ams_config, "JSON config file");
    ams->add_option("--test", ams_test, "test structures (JSONL)");
    ams->add_option("--train", ams_train, "train structures (JSONL)");
    ams->add_option("--out", ams_out, "optional report JSON path");

    // compare-strategies
    auto* cmp = app.add_subcommand("compare-strategies",
                                   "one-stage vs two-stage training on identical seeds");
    TrainFlags cf;
    std::string cmp_config;
    cmp->add_option("--config", cmp_config, "JSON config file");
    cmp->add_option("--in", cf.in, "training structures (JSONL)");
    cmp->add_option("--valid", cf.valid, "validation structures (JSONL; default: train set)");
    cmp->add_option("--out", cf.out, "output report JSON");
    cmp->add_option("--d", cf.d, "model width");
    cmp->add_option("--layers", cf.layers, "transformer layers per block");
    cmp->add_option("--heads", cf.heads, "attention heads");
    cmp->add_option("--max-len", cf.max_len, "max sequence length n_s");
    cmp->add_option("--epochs1", cf.epochs1, "epochs per phase");
    cmp->add_option("--batch", cf.batch, "gradient accumulation group size");
    cmp->add_option("--warmup", cf.warmup, "lr warmup steps");
    cmp->add_option("--seed", cf.seed, "training seed");
    cmp->add_option("--sigma", cf.sigma, "voxel Gaussian width");
    cmp->add_option("--scaling", cf.scaling, "per_axis | isotropic");
    cmp->add_option("--orientation", cf.orientation, "first_residue_neg_z | principal_axes");
    cmp->add_flag("--augment", cf.augment, "train on the 9 rotation grids too");

    // dump-embeddings
    auto* emb = app.add_subcommand("dump-embeddings", "mean-pooled fold latents as TSV");
    std::string emb_config, emb_checkpoint, emb_in, emb_out;
    emb->add_option("--config", emb_config, "JSON config file");
    emb->add_option("--checkpoint", emb_checkpoint, "trained model checkpoint");
    emb->add_option("--in", emb_in, "structures (JSONL)");
    emb->add_option("--out", emb_out, "output TSV path");

    try {
        app.parse(argc, argv);
        if (vox->parsed())
            return cmd_voxelize(*vox, vox_config, vox_in, vox_out, vox_sigma, vox_scaling,
                                vox_orientation);
        if (aug->parsed()) return cmd_augment(*aug, aug_config, aug_in, aug_out, aug_orientation);
        if (spl->parsed()) return cmd_split(*spl, spl_config, spl_in, spl_out, spl_seed);
        if (trn->parsed()) return cmd_train(*trn, tf);
        if (gen->parsed())
            return cmd_generate(*gen, gen_config, gen_checkpoint, gen_grids, gen_out, gen_k, gen_n,
                                gen_max_len, gen_temperature, gen_seed);
        if (eva->parsed())
            return cmd_evaluate(*eva, eva_config, eva_metric, eva_in, eva_generated, eva_checkpoint,
                                eva_tm, eva_out, eva_threshold);
        if (ams->parsed()) return cmd_amsi(*ams, ams_config, ams_test, ams_train, ams_out);
        if (cmp->parsed()) return cmd_compare(*cmp, cmp_config, cf);
        if (emb->parsed())
            return cmd_dump_embeddings(*emb, emb_config, emb_checkpoint, emb_in, emb_out);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;  // help/version exit 0; any parse failure is a usage error
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace fold2seq::cli
