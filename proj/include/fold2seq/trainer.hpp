#pragma once

#include <map>
#include <string>
#include <vector>

#include "fold2seq/losses.hpp"
#include "fold2seq/model.hpp"
#include "fold2seq/structio.hpp"
#include "fold2seq/voxel.hpp"

namespace fold2seq::train {

struct TrainConfig {
    int batch_size = 8;
    int max_epochs = 200;
    int warmup = 100;  // lr schedule warmup steps
    uint64_t seed = 1;
    int patience = 10;
    bool early_stop = true;
    bool augment = false;  // add the 9 rotation grids per structure (stages with a fold path)
    bool clamp_lambda5 = false;
    bool straight_through_cy = false;
    bool reinit_decoder = false;  // stage 2: re-initialize the decoder instead of warm start
    losses::LossWeights weights;  // l5 is overwritten per epoch by lambda5_schedule
    losses::AblationFlags flags;
    voxel::VoxelConfig voxel;

    void validate() const;  // patience >= 1, warmup >= 1, batch_size >= 1, max_epochs >= 1
};

// Original-transformer schedule: d^-0.5 * min(step^-0.5, step * warmup^-1.5).
double lr_schedule(long long step, int d, int warmup);

// Adam over the trainable entries of a store; non-trainable entries are
// never touched. Gradients are consumed as accumulated (caller zeroes).
class Adam {
public:
    explicit Adam(tc::ParamStore& store, double beta1 = 0.9, double beta2 = 0.98,
                  double eps = 1e-9);
    void step(double lr);
    long long steps_taken() const { return t_; }

private:
    tc::ParamStore& store_;
    double b1_, b2_, eps_;
    long long t_ = 0;
    std::map<std::string, tc::Tensor> m_, v_;
};

// Stops after `patience` consecutive epochs without a new best value.
class EarlyStopper {
public:
    explicit EarlyStopper(int patience);
    bool update(double valid);  // true = stop now
    double best() const { return best_; }

private:
    int patience_, strikes_ = 0;
    double best_;
};

// One training example: tokens + fold label, plus voxel grids when a fold
// path is trained (grids[0] canonical, grids[1..9] the rotation variants).
struct TrainItem {
    std::string id;
    std::vector<int> tokens;
    int fold_label = 0;
    std::vector<voxel::VoxelGrid> grids;
};

// Labels = sorted distinct fold_ids -> 0..n_folds-1.
std::map<std::string, int> fold_label_map(const std::vector<io::Structure>& structures);
std::vector<TrainItem> build_items(const std::vector<io::Structure>& structures,
                                   const std::map<std::string, int>& labels,
                                   const voxel::VoxelConfig& vcfg, bool with_grids,
                                   bool with_rotations);

struct EpochStats {
    int epoch = 0;
    double lambda5 = 0.0;
    double train_total = 0.0, valid_total = 0.0;
    double train_re = 0.0, valid_re = 0.0;  // RE_s in stage 1, RE_f otherwise
};

struct TrainResult {
    model::ModelParams params;  // best-validation snapshot
    std::vector<EpochStats> curve;
    std::vector<std::string> metrics_log;  // one losses::format_step_log line per optimizer step
    double best_valid = 0.0;
    int best_epoch = 0;
};

struct EpochEval {
    double total = 0.0;
    double re = 0.0;
};
// Eval-mode mean losses over items (canonical grids only, no stat updates).
EpochEval evaluate(model::ModelParams& params, const std::vector<TrainItem>& items,
                   const TrainConfig& cfg, losses::Stage stage, double lambda5);

// Teacher-forced argmax token accuracy over items (fold memory unless stage 1).
double teacher_forced_accuracy(model::ModelParams& params, const std::vector<TrainItem>& items,
                               losses::Stage stage);

TrainResult train_stage1(model::ModelParams params, const std::vector<TrainItem>& train_items,
                         const std::vector<TrainItem>& valid_items, const TrainConfig& cfg);
// Requires stage-1 parameters; the sequence encoder is frozen for the run.
TrainResult train_stage2(model::ModelParams params, const std::vector<TrainItem>& train_items,
                         const std::vector<TrainItem>& valid_items, const TrainConfig& cfg);
TrainResult train_joint(model::ModelParams params, const std::vector<TrainItem>& train_items,
                        const std::vector<TrainItem>& valid_items, const TrainConfig& cfg);

// Appendix-B harness: one-stage vs two-stage on identical data and seeds,
// fixed epoch count (early stopping off) so both RE_f curves share one grid.
struct CompareReport {
    int epochs = 0;
    uint64_t seed = 0;
    std::vector<double> one_stage_train_re, one_stage_valid_re;
    std::vector<double> two_stage_train_re, two_stage_valid_re;
    double one_stage_final_valid_re = 0.0, two_stage_final_valid_re = 0.0;
    double one_stage_final_ppl = 0.0, two_stage_final_ppl = 0.0;
    std::string to_json() const;
};
CompareReport compare_strategies(const model::ModelConfig& mcfg,
                                 const std::vector<TrainItem>& train_items,
                                 const std::vector<TrainItem>& valid_items,
                                 const TrainConfig& cfg);

}  // namespace fold2seq::train
