#pragma once

#include "linevit/metrics.hpp"
#include "linevit/vitmodel.hpp"

#include <limits>
#include <map>
#include <string>
#include <vector>

namespace linevit::train {

using targets::Task;
using vit::ModelParams;
using vit::TaskOutputs;

// Angle 2.0, coordinates 1.0, everything else 0.5.
std::map<Task, double> default_loss_weights();

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 32;
    int max_epochs = 40;
    double huber_delta = 1.0;
    std::map<Task, double> loss_weights = default_loss_weights();
    int plateau_patience = 3;
    double plateau_factor = 0.1; // gamma
    double min_delta = 1e-4;     // relative improvement threshold
    int early_stop_patience = 5;
    uint64_t seed = 0;
    double val_fraction = 0.1;
    double weight_decay = 0.01;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    int threads = 1;
    double noise_max = 0.3; // target normalization scale for the noise head

    void validate() const;
};

struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// 0.5 r^2 for |r| <= delta, delta (|r| - delta/2) beyond.
double huber(double residual, double delta);
double huber_grad(double residual, double delta);

using TaskTargets = std::map<Task, Eigen::MatrixXd>;

// sum over tasks of w_task * mean over (batch x dims) of elementwise Huber.
// Throws ContractError when prediction and target task sets differ or a
// weight is missing.
double weighted_loss(const TaskOutputs& predictions, const TaskTargets& targets,
                     const std::map<Task, double>& weights, double delta);

// Loss value plus gradients for every trainable tensor (zero blocks for a
// frozen backbone).
struct LossGrads {
    double loss = 0;
    ModelParams grads;
};
LossGrads backward(const ModelParams& params, const Eigen::MatrixXd& images,
                   const TaskTargets& targets, const std::map<Task, double>& weights,
                   double delta, int n_threads = 1);

// Decoupled weight decay AdamW with bias correction. Frozen tensors are
// untouched.
struct AdamState {
    ModelParams m, v;
    int64_t step = 0;
};
AdamState make_adam_state(const ModelParams& params);
void adamw_step(ModelParams& params, const ModelParams& grads, AdamState& state,
                double lr, const TrainConfig& cfg);

// Reduce-on-plateau: after `plateau_patience` consecutive epochs without a
// relative improvement > min_delta, lr <- gamma * lr and the counter resets.
struct PlateauState {
    double best = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;
};
double plateau_step(PlateauState& state, double val_loss, double current_lr,
                    const TrainConfig& cfg);

bool improved(double value, double best, double min_delta);

// Early stopping bookkeeping: stop once early_stop_patience consecutive
// epochs fail to improve on the best validation loss.
struct EarlyStopState {
    double best = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int bad_epochs = 0;
};
// Returns true when training should stop after this epoch.
bool early_stop_update(EarlyStopState& state, int epoch, double val_loss,
                       const TrainConfig& cfg);

// In-memory dataset: raw u8 images plus normalized target matrices.
struct Dataset {
    std::vector<ImageCanvas> images;
    std::vector<std::string> image_ids;
    TaskTargets targets; // n x dim, rows align with images
    targets::DatasetVariant variant = targets::DatasetVariant::I;
    targets::NormScales scales;
    int n() const { return static_cast<int>(images.size()); }
};
Dataset load_dataset(const std::string& dataset_dir, targets::DatasetVariant variant,
                     double noise_max = 0.3);

// Deterministic shuffled split; val takes the first ceil(frac*n) indices.
struct Split {
    std::vector<int> train, val;
};
Split split_dataset(int n, double val_fraction, uint64_t seed);

struct FitResult {
    MetricSeries series;
    std::string best_checkpoint;
    std::string last_checkpoint;
    int best_epoch = 0;
    double best_val = 0;
    bool early_stopped = false;
};

// The full protocol: AdamW on the weighted Huber loss, per-epoch validation
// metrics, plateau decay, early stopping, best-val checkpointing. `resume`
// may name a last-state checkpoint to continue from; epochs append without
// gaps. Aborts with a TrainingError naming epoch/batch on non-finite loss.
FitResult fit(const Dataset& data, const vit::ModelConfig& mcfg, const TrainConfig& tcfg,
              const std::string& out_dir, const std::string& resume = "",
              bool verbose = true);

struct TimingStat {
    int batch_size = 0;
    double median_ms = 0, q1_ms = 0, q3_ms = 0;
    int reps = 0;
};
// Median and interquartile wall time per batch size; warm-up excluded.
std::vector<TimingStat> measure_inference_time(const ModelParams& params,
                                               const std::vector<int>& batch_sizes,
                                               int warmup = 2, int reps = 10,
                                               uint64_t seed = 0);

} // namespace linevit::train
