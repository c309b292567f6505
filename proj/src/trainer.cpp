#include "fold2seq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <set>

#include <json.hpp>

namespace fold2seq::train {

using losses::LossParts;
using losses::LossWeights;
using losses::Stage;
using model::Binder;
using model::ModelParams;
using tc::Graph;
using tc::Tensor;
using tc::Var;

void TrainConfig::validate() const {
    if (batch_size < 1) throw DataError("train config: batch_size must be >= 1");
    if (max_epochs < 1) throw DataError("train config: max_epochs must be >= 1");
    if (warmup < 1) throw DataError("train config: warmup must be >= 1");
    if (patience < 1) throw DataError("train config: patience must be >= 1");
}

double lr_schedule(long long step, int d, int warmup) {
    if (step < 1) throw DataError("lr_schedule: step must be >= 1");
    if (warmup < 1) throw DataError("lr_schedule: warmup must be >= 1");
    const double s = static_cast<double>(step), w = static_cast<double>(warmup);
    return (1.0 / std::sqrt(static_cast<double>(d))) *
           std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

Adam::Adam(tc::ParamStore& store, double beta1, double beta2, double eps)
    : store_(store), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto* p : store.all())
        if (p->trainable) {
            m_.emplace(p->name, Tensor(p->value.shape));
            v_.emplace(p->name, Tensor(p->value.shape));
        }
}

void Adam::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto* p : store_.all()) {
        if (!p->trainable) continue;
        auto mi = m_.find(p->name);
        if (mi == m_.end()) {  // became trainable after construction
            mi = m_.emplace(p->name, Tensor(p->value.shape)).first;
            v_.emplace(p->name, Tensor(p->value.shape));
        }
        Tensor &m = mi->second, &v = v_.at(p->name);
        for (size_t i = 0; i < p->value.v.size(); ++i) {
            const double g = p->grad.v[i];
            m.v[i] = b1_ * m.v[i] + (1.0 - b1_) * g;
            v.v[i] = b2_ * v.v[i] + (1.0 - b2_) * g * g;
            p->value.v[i] -= lr * (m.v[i] / bc1) / (std::sqrt(v.v[i] / bc2) + eps_);
        }
    }
}

EarlyStopper::EarlyStopper(int patience)
    : patience_(patience), best_(std::numeric_limits<double>::infinity()) {
    if (patience < 1) throw DataError("early stopping: patience must be >= 1");
}

bool EarlyStopper::update(double valid) {
    if (valid < best_) {
        best_ = valid;
        strikes_ = 0;
        return false;
    }
    return ++strikes_ >= patience_;
}

std::map<std::string, int> fold_label_map(const std::vector<io::Structure>& structures) {
    std::set<std::string> folds;
    for (const auto& s : structures) folds.insert(s.fold_id);
    std::map<std::string, int> labels;
    int next = 0;
    for (const auto& f : folds) labels[f] = next++;
    return labels;
}

std::vector<TrainItem> build_items(const std::vector<io::Structure>& structures,
                                   const std::map<std::string, int>& labels,
                                   const voxel::VoxelConfig& vcfg, bool with_grids,
                                   bool with_rotations) {
    std::vector<TrainItem> items;
    items.reserve(structures.size());
    for (const auto& s : structures) {
        TrainItem item;
        item.id = s.id;
        item.tokens = model::encode_sequence(s.sequence());
        const auto it = labels.find(s.fold_id);
        if (it == labels.end())
            throw DataError("structure " + s.id + ": fold '" + s.fold_id +
                            "' missing from label map");
        item.fold_label = it->second;
        if (with_grids) {
            const io::Structure oriented = voxel::canonical_orient(s, vcfg.orientation_mode);
            const io::Structure rescaled = voxel::rescale(oriented, vcfg).structure;
            item.grids.push_back(voxel::voxelize(rescaled, vcfg));
            if (with_rotations)
                for (const auto& rot : voxel::augment_rotations(rescaled))
                    item.grids.push_back(voxel::voxelize(rot, vcfg));
        }
        items.push_back(std::move(item));
    }
    return items;
}

namespace {

struct PartVals {
    double re_f, re_s, fc_f, fc_s, cs, cy;
    PartVals() { re_f = re_s = fc_f = fc_s = cs = cy = std::numeric_limits<double>::quiet_NaN(); }
};

// Builds one item's Eq. 4 loss on grids[grid_idx]; fills vals with the
// realized part values.
Var build_item_loss(Binder& b, const TrainItem& item, size_t grid_idx, Stage stage,
                    const TrainConfig& cfg, double lambda5, bool training, PartVals& vals) {
    Graph& g = b.graph();
    LossWeights w = cfg.weights;
    w.l5 = lambda5;

    std::vector<int> prefix = {model::kBos};
    prefix.insert(prefix.end(), item.tokens.begin(), item.tokens.end());
    std::vector<int> targets = item.tokens;
    targets.push_back(model::kEos);

    LossParts parts;
    std::optional<model::SeqLatent> h_s;
    auto ensure_hs = [&]() -> const model::SeqLatent& {
        if (!h_s.has_value()) h_s = model::seq_encode(b, item.tokens);
        return *h_s;
    };
    auto read = [&](Var x) { return g.value(x).v[0]; };

    if (stage != Stage::Stage2) {
        if (cfg.flags.use_re_s) {
            const model::SeqLatent& hs = ensure_hs();
            parts.re_s = losses::loss_re(g, model::decode_logits(b, hs.h, hs.pad_mask, prefix),
                                         targets, {});
            vals.re_s = read(*parts.re_s);
        }
        if (cfg.flags.use_fc) {
            const model::SeqLatent& hs = ensure_hs();
            parts.fc_s = losses::loss_fc(b, hs.h, hs.pad_mask, item.fold_label);
            vals.fc_s = read(*parts.fc_s);
        }
    }
    if (stage != Stage::Stage1) {
        if (item.grids.size() <= grid_idx)
            throw DataError("item " + item.id + " has no voxel grid");
        Var h_f = model::fold_encode(b, item.grids[grid_idx], training);
        parts.re_f = losses::loss_re(g, model::decode_logits(b, h_f, {}, prefix), targets, {});
        vals.re_f = read(*parts.re_f);
        if (cfg.flags.use_fc) {
            parts.fc_f = losses::loss_fc(b, h_f, {}, item.fold_label);
            vals.fc_f = read(*parts.fc_f);
        }
        if (w.l5 != 0.0 && cfg.flags.use_cs) {
            parts.cs = losses::loss_cs(g, h_f, ensure_hs(), w.k);
            vals.cs = read(*parts.cs);
        }
        if (w.l5 != 0.0 && cfg.flags.use_cy) {
            const losses::CyclicResult cyc =
                losses::cyclic_latent(b, h_f, {}, item.tokens, cfg.straight_through_cy);
            parts.cy = losses::loss_cy(g, ensure_hs(), cyc.latent);
            vals.cy = read(*parts.cy);
        }
    }
    return losses::loss_total(g, parts, w, stage, cfg.flags);
}

struct MeanAcc {
    double sum = 0.0;
    long long n = 0;
    void add(double v) {
        if (std::isfinite(v)) {
            sum += v;
            ++n;
        }
    }
    double mean() const { return n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN(); }
};

std::vector<Tensor> snapshot_values(const tc::ParamStore& store) {
    std::vector<Tensor> snap;
    for (const auto* p : store.all()) snap.push_back(p->value);
    return snap;
}

void restore_values(tc::ParamStore& store, const std::vector<Tensor>& snap) {
    auto params = store.all();
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i];
}

void set_sequence_encoder_trainable(ModelParams& params, bool flag) {
    for (const auto& name : model::sequence_encoder_param_names(params.cfg))
        params.store.at(name).trainable = flag;
}

void reinit_decoder_params(ModelParams& params, uint64_t seed) {
    Rng rng(seed);
    ModelParams fresh = ModelParams::init(params.cfg, rng);
    for (const auto* p : fresh.store.all())
        if (p->name.rfind("dec.", 0) == 0) params.store.at(p->name).value = p->value;
}

TrainResult run_training(ModelParams params, const std::vector<TrainItem>& train_items,
                         const std::vector<TrainItem>& valid_items, const TrainConfig& cfg,
                         Stage stage) {
    cfg.validate();
    params.cfg.validate();
    if (train_items.empty()) throw DataError("training requires at least one item");
    if (valid_items.empty()) throw DataError("training requires at least one validation item");

    // One occurrence per optimizer visit: (item, grid) pairs; augmentation
    // adds the 9 rotation grids, so steps per epoch are 10x the item count.
    std::vector<std::pair<size_t, size_t>> occurrences;
    for (size_t i = 0; i < train_items.size(); ++i) {
        occurrences.emplace_back(i, 0);
        if (cfg.augment && stage != Stage::Stage1) {
            if (train_items[i].grids.size() < 10)
                throw DataError("item " + train_items[i].id +
                                " lacks rotation grids for augmentation");
            for (size_t r = 1; r < 10; ++r) occurrences.emplace_back(i, r);
        }
    }

    TrainResult res;
    res.params = std::move(params);
    Adam adam(res.params.store);
    EarlyStopper stopper(cfg.patience);
    double best = std::numeric_limits<double>::infinity();
    std::vector<Tensor> best_snap;
    int best_epoch = 0;
    long long gstep = 0;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const double l5 =
            losses::lambda5_schedule(epoch, cfg.weights.e, cfg.clamp_lambda5);
        std::vector<std::pair<size_t, size_t>> order = occurrences;
        Rng shuffle_rng(derive_seed(cfg.seed, static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        MeanAcc ep_total, ep_re;
        for (size_t at = 0; at < order.size();) {
            const size_t group_n = std::min<size_t>(cfg.batch_size, order.size() - at);
            res.params.store.zero_grads();
            MeanAcc g_total, g_re_f, g_re_s, g_fc_f, g_fc_s, g_cs, g_cy;
            for (size_t j = 0; j < group_n; ++j, ++at) {
                const auto [item_idx, grid_idx] = order[at];
                Graph g;
                Binder b(g, res.params);
                PartVals vals;
                Var total = build_item_loss(b, train_items[item_idx], grid_idx, stage, cfg, l5,
                                            true, vals);
                const double tv = g.value(total).v[0];
                if (!std::isfinite(tv))
                    throw NumericError("training diverged at step " + std::to_string(gstep + 1) +
                                       " (non-finite loss on item " + train_items[item_idx].id +
                                       ")");
                g.backward(g.scale(total, 1.0 / static_cast<double>(group_n)));
                g_total.add(tv);
                g_re_f.add(vals.re_f);
                g_re_s.add(vals.re_s);
                g_fc_f.add(vals.fc_f);
                g_fc_s.add(vals.fc_s);
                g_cs.add(vals.cs);
                g_cy.add(vals.cy);
                ep_total.add(tv);
                ep_re.add(stage == Stage::Stage1 ? vals.re_s : vals.re_f);
            }
            ++gstep;
            adam.step(lr_schedule(gstep, res.params.cfg.d, cfg.warmup));

            losses::StepLog row;
            row.step = gstep;
            row.stage = stage;
            row.re_f = g_re_f.mean();
            row.re_s = g_re_s.mean();
            row.fc_f = g_fc_f.mean();
            row.fc_s = g_fc_s.mean();
            row.cs = g_cs.mean();
            row.cy = g_cy.mean();
            row.total = g_total.mean();
            res.metrics_log.push_back(losses::format_step_log(row));
        }

        const EpochEval ev = evaluate(res.params, valid_items, cfg, stage, l5);
        EpochStats st;
        st.epoch = epoch;
        st.lambda5 = l5;
        st.train_total = ep_total.mean();
        st.valid_total = ev.total;
        st.train_re = ep_re.mean();
        st.valid_re = ev.re;
        res.curve.push_back(st);

        if (ev.total < best) {
            best = ev.total;
            best_epoch = epoch;
            best_snap = snapshot_values(res.params.store);
        }
        if (cfg.early_stop && stopper.update(ev.total)) break;
    }

    if (!best_snap.empty()) restore_values(res.params.store, best_snap);
    res.best_valid = best;
    res.best_epoch = best_epoch;
    return res;
}

}  // namespace

EpochEval evaluate(ModelParams& params, const std::vector<TrainItem>& items,
                   const TrainConfig& cfg, Stage stage, double lambda5) {
    if (items.empty()) throw DataError("evaluate: no items");
    MeanAcc total, re;
    for (const TrainItem& item : items) {
        Graph g;
        Binder b(g, params);
        PartVals vals;
        Var t = build_item_loss(b, item, 0, stage, cfg, lambda5, false, vals);
        total.add(g.value(t).v[0]);
        re.add(stage == Stage::Stage1 ? vals.re_s : vals.re_f);
    }
    return {total.mean(), re.mean()};
}

double teacher_forced_accuracy(ModelParams& params, const std::vector<TrainItem>& items,
                               Stage stage) {
    if (items.empty()) throw DataError("teacher_forced_accuracy: no items");
    long long hits = 0, positions = 0;
    for (const TrainItem& item : items) {
        Graph g;
        Binder b(g, params);
        std::vector<int> prefix = {model::kBos};
        prefix.insert(prefix.end(), item.tokens.begin(), item.tokens.end());
        std::vector<int> targets = item.tokens;
        targets.push_back(model::kEos);

        Var memory;
        std::vector<uint8_t> mem_mask;
        if (stage == Stage::Stage1) {
            const model::SeqLatent hs = model::seq_encode(b, item.tokens);
            memory = hs.h;
            mem_mask = hs.pad_mask;
        } else {
            if (item.grids.empty()) throw DataError("item " + item.id + " has no voxel grid");
            memory = model::fold_encode(b, item.grids.front(), false);
        }
        const Tensor logits = g.value(model::decode_logits(b, memory, mem_mask, prefix));
        for (int r = 0; r < logits.rows(); ++r) {
            int best = 0;
            for (int c = 1; c < logits.cols(); ++c)
                if (logits.at(r, c) > logits.at(r, best)) best = c;
            hits += best == targets[r] ? 1 : 0;
            ++positions;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(positions);
}

TrainResult train_stage1(ModelParams params, const std::vector<TrainItem>& train_items,
                         const std::vector<TrainItem>& valid_items, const TrainConfig& cfg) {
    return run_training(std::move(params), train_items, valid_items, cfg, Stage::Stage1);
}

TrainResult train_stage2(ModelParams params, const std::vector<TrainItem>& train_items,
                         const std::vector<TrainItem>& valid_items, const TrainConfig& cfg) {
    if (cfg.reinit_decoder) reinit_decoder_params(params, derive_seed(cfg.seed, 0xDECull));
    set_sequence_encoder_trainable(params, false);
    TrainResult res = run_training(std::move(params), train_items, valid_items, cfg, Stage::Stage2);
    set_sequence_encoder_trainable(res.params, true);
    return res;
}

TrainResult train_joint(ModelParams params, const std::vector<TrainItem>& train_items,
                        const std::vector<TrainItem>& valid_items, const TrainConfig& cfg) {
    return run_training(std::move(params), train_items, valid_items, cfg, Stage::Joint);
}

std::string CompareReport::to_json() const {
    nlohmann::json j;
    j["epochs"] = epochs;
    j["seed"] = seed;
    j["one_stage"] = {{"train_RE_f", one_stage_train_re},
                      {"valid_RE_f", one_stage_valid_re},
                      {"final_valid_RE_f", one_stage_final_valid_re},
                      {"final_valid_ppl", one_stage_final_ppl}};
    j["two_stage"] = {{"train_RE_f", two_stage_train_re},
                      {"valid_RE_f", two_stage_valid_re},
                      {"final_valid_RE_f", two_stage_final_valid_re},
                      {"final_valid_ppl", two_stage_final_ppl}};
    return j.dump(2);
}

CompareReport compare_strategies(const model::ModelConfig& mcfg,
                                 const std::vector<TrainItem>& train_items,
                                 const std::vector<TrainItem>& valid_items,
                                 const TrainConfig& cfg) {
    TrainConfig fixed = cfg;
    fixed.early_stop = false;  // equal epoch grids for both strategies

    Rng r1(cfg.seed);
    TrainResult one =
        train_joint(ModelParams::init(mcfg, r1), train_items, valid_items, fixed);

    Rng r2(cfg.seed);
    TrainResult s1 =
        train_stage1(ModelParams::init(mcfg, r2), train_items, valid_items, fixed);
    TrainResult two = train_stage2(std::move(s1.params), train_items, valid_items, fixed);

    CompareReport rep;
    rep.epochs = fixed.max_epochs;
    rep.seed = cfg.seed;
    for (const EpochStats& st : one.curve) {
        rep.one_stage_train_re.push_back(st.train_re);
        rep.one_stage_valid_re.push_back(st.valid_re);
    }
    for (const EpochStats& st : two.curve) {
        rep.two_stage_train_re.push_back(st.train_re);
        rep.two_stage_valid_re.push_back(st.valid_re);
    }
    rep.one_stage_final_valid_re = rep.one_stage_valid_re.back();
    rep.two_stage_final_valid_re = rep.two_stage_valid_re.back();
    rep.one_stage_final_ppl = std::exp(rep.one_stage_final_valid_re);
    rep.two_stage_final_ppl = std::exp(rep.two_stage_final_valid_re);
    return rep;
}

}  // namespace fold2seq::train
