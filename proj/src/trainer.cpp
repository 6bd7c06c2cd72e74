#include "linevit/trainer.hpp"

#include "linevit/analysis.hpp"
#include "linevit/config.hpp"
#include "linevit/csv.hpp"
#include "linevit/image.hpp"
#include "linevit/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;

namespace linevit::train {

std::map<Task, double> default_loss_weights() {
    return {{Task::angle, 2.0},  {Task::coords, 1.0}, {Task::noise, 0.5},
            {Task::length, 0.5}, {Task::width, 0.5},  {Task::color, 0.5}};
}

void TrainConfig::validate() const {
    if (lr < 0) throw ConfigError("train: lr must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (huber_delta <= 0) throw ConfigError("train: huber_delta must be > 0");
    if (!(plateau_factor > 0 && plateau_factor < 1)) {
        throw ConfigError("train: plateau_factor must be in (0, 1)");
    }
    if (plateau_patience < 1 || early_stop_patience < 1) {
        throw ConfigError("train: patiences must be >= 1");
    }
    if (!(val_fraction > 0 && val_fraction < 1)) {
        throw ConfigError("train: val_fraction must be in (0, 1)");
    }
    if (threads < 1) throw ConfigError("train: threads must be >= 1");
}

double huber(double r, double delta) {
    double a = std::abs(r);
    if (a <= delta) return 0.5 * r * r;
    return delta * (a - 0.5 * delta);
}

double huber_grad(double r, double delta) {
    if (std::abs(r) <= delta) return r;
    return r > 0 ? delta : -delta;
}

namespace {

void check_task_sets(const TaskOutputs& predictions, const TaskTargets& targets) {
    for (const auto& [task, _] : targets) {
        if (!predictions.count(task)) {
            throw ContractError("loss: predictions missing task " +
                                targets::task_name(task));
        }
    }
    for (const auto& [task, _] : predictions) {
        if (!targets.count(task)) {
            throw ContractError("loss: targets missing task " + targets::task_name(task));
        }
    }
}

} // namespace

double weighted_loss(const TaskOutputs& predictions, const TaskTargets& targets,
                     const std::map<Task, double>& weights, double delta) {
    check_task_sets(predictions, targets);
    double total = 0;
    for (const auto& [task, pred] : predictions) {
        const Eigen::MatrixXd& tgt = targets.at(task);
        if (pred.rows() != tgt.rows() || pred.cols() != tgt.cols()) {
            throw ContractError("loss: shape mismatch for task " + targets::task_name(task));
        }
        auto wit = weights.find(task);
        if (wit == weights.end()) {
            throw ContractError("loss: no weight for task " + targets::task_name(task));
        }
        double sum = 0;
        for (Eigen::Index i = 0; i < pred.rows(); ++i) {
            for (Eigen::Index j = 0; j < pred.cols(); ++j) {
                sum += huber(pred(i, j) - tgt(i, j), delta);
            }
        }
        total += wit->second * sum / static_cast<double>(pred.size());
    }
    return total;
}

LossGrads backward(const ModelParams& params, const Eigen::MatrixXd& images,
                   const TaskTargets& targets, const std::map<Task, double>& weights,
                   double delta, int n_threads) {
    vit::ForwardCaches caches;
    TaskOutputs outputs = vit::forward(params, images, &caches, n_threads);
    check_task_sets(outputs, targets);

    LossGrads result;
    result.loss = weighted_loss(outputs, targets, weights, delta);

    TaskOutputs d_outputs;
    for (const auto& [task, pred] : outputs) {
        const Eigen::MatrixXd& tgt = targets.at(task);
        double w = weights.at(task) / static_cast<double>(pred.size());
        Eigen::MatrixXd d(pred.rows(), pred.cols());
        for (Eigen::Index i = 0; i < pred.rows(); ++i) {
            for (Eigen::Index j = 0; j < pred.cols(); ++j) {
                d(i, j) = w * huber_grad(pred(i, j) - tgt(i, j), delta);
            }
        }
        d_outputs[task] = std::move(d);
    }
    result.grads = vit::backprop(params, images, caches, d_outputs, n_threads);
    return result;
}

AdamState make_adam_state(const ModelParams& params) {
    return {vit::zeros_like(params), vit::zeros_like(params), 0};
}

void adamw_step(ModelParams& params, const ModelParams& grads, AdamState& state,
                double lr, const TrainConfig& cfg) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    const bool freeze = params.cfg.freeze_backbone;

    auto p_refs = vit::tensor_refs(params);
    auto g_refs = vit::tensor_refs(const_cast<ModelParams&>(grads));
    auto m_refs = vit::tensor_refs(state.m);
    auto v_refs = vit::tensor_refs(state.v);
    for (std::size_t i = 0; i < p_refs.size(); ++i) {
        if (!vit::is_trainable(p_refs[i].role, freeze)) continue;
        double* p = p_refs[i].data;
        const double* g = g_refs[i].data;
        double* m = m_refs[i].data;
        double* v = v_refs[i].data;
        for (std::ptrdiff_t j = 0; j < p_refs[i].size; ++j) {
            p[j] -= lr * cfg.weight_decay * p[j]; // decoupled decay
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

bool improved(double value, double best, double min_delta) {
    if (!std::isfinite(best)) return std::isfinite(value);
    return value < best * (1.0 - min_delta);
}

double plateau_step(PlateauState& state, double val_loss, double current_lr,
                    const TrainConfig& cfg) {
    if (improved(val_loss, state.best, cfg.min_delta)) {
        state.best = val_loss;
        state.bad_epochs = 0;
        return current_lr;
    }
    if (++state.bad_epochs >= cfg.plateau_patience) {
        state.bad_epochs = 0;
        return cfg.plateau_factor * current_lr;
    }
    return current_lr;
}

bool early_stop_update(EarlyStopState& state, int epoch, double val_loss,
                       const TrainConfig& cfg) {
    if (improved(val_loss, state.best, cfg.min_delta)) {
        state.best = val_loss;
        state.best_epoch = epoch;
        state.bad_epochs = 0;
        return false;
    }
    ++state.bad_epochs;
    return state.bad_epochs >= cfg.early_stop_patience;
}

Dataset load_dataset(const std::string& dataset_dir, targets::DatasetVariant variant,
                     double noise_max) {
    Dataset d;
    d.variant = variant;
    auto manifest = gen::read_manifest(gen::manifest_path(dataset_dir));
    if (manifest.empty()) throw TrainingError("dataset: empty manifest");
    d.images.reserve(manifest.size());
    d.image_ids.reserve(manifest.size());
    for (const auto& rec : manifest) {
        d.images.push_back(read_png((fs::path(dataset_dir) / (rec.image_id + ".png")).string()));
        d.image_ids.push_back(rec.image_id);
    }
    d.scales.image_size = d.images[0].width;
    d.scales.noise_max = noise_max;

    const auto& tasks = targets::tasks_for(variant);
    const int n = static_cast<int>(manifest.size());
    for (Task task : tasks) {
        d.targets[task] = Eigen::MatrixXd::Zero(n, targets::task_dim(task));
    }
    for (int i = 0; i < n; ++i) {
        auto t = targets::normalize(manifest[i], variant, d.scales);
        for (Task task : tasks) {
            auto& m = d.targets[task];
            switch (task) {
                case Task::angle: m(i, 0) = t.angle; break;
                case Task::coords:
                    for (int j = 0; j < 4; ++j) m(i, j) = t.coords[j];
                    break;
                case Task::noise: m(i, 0) = t.noise; break;
                case Task::length: m(i, 0) = t.length; break;
                case Task::width: m(i, 0) = t.width; break;
                case Task::color:
                    for (int j = 0; j < 3; ++j) m(i, j) = t.color[j];
                    break;
            }
        }
    }
    return d;
}

Split split_dataset(int n, double val_fraction, uint64_t seed) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    SplitMix64 rng(mix_seed(seed, 0));
    for (int i = n - 1; i > 0; --i) {
        int j = static_cast<int>(rng.next_below(static_cast<uint64_t>(i) + 1));
        std::swap(idx[i], idx[j]);
    }
    int n_val = std::max(1, static_cast<int>(std::ceil(val_fraction * n)));
    if (n_val >= n) throw TrainingError("split: validation would swallow the dataset");
    Split s;
    s.val.assign(idx.begin(), idx.begin() + n_val);
    s.train.assign(idx.begin() + n_val, idx.end());
    return s;
}

namespace {

Eigen::MatrixXd gather_images(const Dataset& d, const std::vector<int>& ids, int begin,
                              int end) {
    const auto px = static_cast<Eigen::Index>(d.images[0].pixels.size());
    Eigen::MatrixXd m(end - begin, px);
    for (int r = begin; r < end; ++r) {
        const auto& img = d.images[static_cast<std::size_t>(ids[r])].pixels;
        for (Eigen::Index j = 0; j < px; ++j) {
            m(r - begin, j) = img[static_cast<std::size_t>(j)] / 255.0;
        }
    }
    return m;
}

TaskTargets gather_targets(const Dataset& d, const std::vector<int>& ids, int begin,
                           int end) {
    TaskTargets out;
    for (const auto& [task, all] : d.targets) {
        Eigen::MatrixXd m(end - begin, all.cols());
        for (int r = begin; r < end; ++r) m.row(r - begin) = all.row(ids[r]);
        out[task] = std::move(m);
    }
    return out;
}

// Per-component Pearson, averaged per task. Undefined correlations (zero
// variance) propagate as NaN in the log rather than a silent zero.
std::map<Task, double> task_correlations(const TaskOutputs& preds,
                                         const TaskTargets& targets) {
    std::map<Task, double> rho;
    for (const auto& [task, p] : preds) {
        const Eigen::MatrixXd& t = targets.at(task);
        double acc = 0;
        for (Eigen::Index j = 0; j < p.cols(); ++j) {
            std::vector<double> x(p.rows()), y(p.rows());
            for (Eigen::Index i = 0; i < p.rows(); ++i) {
                x[static_cast<std::size_t>(i)] = p(i, j);
                y[static_cast<std::size_t>(i)] = t(i, j);
            }
            try {
                acc += analysis::pearson(x, y);
            } catch (const analysis::UndefinedCorrelationError&) {
                acc += std::numeric_limits<double>::quiet_NaN();
            }
        }
        rho[task] = acc / static_cast<double>(p.cols());
    }
    return rho;
}

struct ValResult {
    double loss = 0;
    std::map<Task, double> rho;
    double mean_batch_ms = 0;
    TaskOutputs predictions;
};

ValResult run_validation(const ModelParams& params, const Dataset& data,
                         const std::vector<int>& val_ids, const TrainConfig& cfg) {
    const int n = static_cast<int>(val_ids.size());
    TaskOutputs preds;
    for (const auto& [task, all] : data.targets) {
        preds[task] = Eigen::MatrixXd::Zero(n, all.cols());
    }
    double total_ms = 0;
    int n_batches = 0;
    for (int b = 0; b < n; b += cfg.batch_size) {
        int e = std::min(n, b + cfg.batch_size);
        Eigen::MatrixXd imgs = gather_images(data, val_ids, b, e);
        auto t0 = std::chrono::steady_clock::now();
        TaskOutputs out = vit::forward(params, imgs, nullptr, cfg.threads);
        auto t1 = std::chrono::steady_clock::now();
        total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
        ++n_batches;
        for (auto& [task, m] : out) preds[task].middleRows(b, e - b) = m;
    }
    TaskTargets val_targets = gather_targets(data, val_ids, 0, n);
    ValResult r;
    r.loss = weighted_loss(preds, val_targets, cfg.loss_weights, cfg.huber_delta);
    r.rho = task_correlations(preds, val_targets);
    r.mean_batch_ms = total_ms / std::max(1, n_batches);
    r.predictions = std::move(preds);
    return r;
}

std::map<std::string, Eigen::MatrixXd> adam_to_extra(const AdamState& st) {
    std::map<std::string, Eigen::MatrixXd> extra;
    auto m_refs = vit::tensor_refs(const_cast<ModelParams&>(st.m));
    auto v_refs = vit::tensor_refs(const_cast<ModelParams&>(st.v));
    for (const auto& r : m_refs) {
        extra["adam_m/" + r.name] =
            Eigen::Map<const Eigen::MatrixXd>(r.data, r.size, 1);
    }
    for (const auto& r : v_refs) {
        extra["adam_v/" + r.name] =
            Eigen::Map<const Eigen::MatrixXd>(r.data, r.size, 1);
    }
    return extra;
}

void adam_from_extra(AdamState& st, const std::map<std::string, Eigen::MatrixXd>& extra) {
    auto fill = [&extra](ModelParams& p, const std::string& prefix) {
        for (auto& r : vit::tensor_refs(p)) {
            auto it = extra.find(prefix + r.name);
            if (it == extra.end()) {
                throw TrainingError("resume: checkpoint lacks optimizer state " + prefix +
                                    r.name);
            }
            if (it->second.size() != r.size) {
                throw TrainingError("resume: optimizer state shape mismatch for " + r.name);
            }
            std::copy(it->second.data(), it->second.data() + r.size, r.data);
        }
    };
    fill(st.m, "adam_m/");
    fill(st.v, "adam_v/");
}

} // namespace

FitResult fit(const Dataset& data, const vit::ModelConfig& mcfg, const TrainConfig& tcfg,
              const std::string& out_dir, const std::string& resume, bool verbose) {
    mcfg.validate();
    tcfg.validate();
    fs::create_directories(out_dir);
    const std::string best_path = (fs::path(out_dir) / "ckpt_best.bin").string();
    const std::string last_path = (fs::path(out_dir) / "ckpt_last.bin").string();
    const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();

    Split split = split_dataset(data.n(), tcfg.val_fraction, tcfg.seed);

    ModelParams params;
    AdamState adam{};
    PlateauState plateau;
    EarlyStopState stopper;
    double lr = tcfg.lr;
    int start_epoch = 0;
    MetricSeries series;

    if (resume.empty()) {
        params = vit::init_params(mcfg, tcfg.seed);
        adam = make_adam_state(params);
    } else {
        auto ck = vit::load_checkpoint(resume);
        if (vit::config_to_metadata(ck.params.cfg) != vit::config_to_metadata(mcfg)) {
            throw TrainingError("resume: checkpoint model config differs from requested");
        }
        params = std::move(ck.params);
        adam = make_adam_state(params);
        adam_from_extra(adam, ck.extra);
        auto meta = [&ck](const std::string& k) {
            auto it = ck.metadata.find(k);
            if (it == ck.metadata.end()) {
                throw TrainingError("resume: checkpoint missing metadata " + k);
            }
            return it->second;
        };
        adam.step = std::stoll(meta("train.adam_step"));
        lr = std::stod(meta("train.lr"));
        start_epoch = std::stoi(meta("train.epoch"));
        stopper.best = std::stod(meta("train.best_val"));
        stopper.best_epoch = std::stoi(meta("train.best_epoch"));
        stopper.bad_epochs = std::stoi(meta("train.bad_epochs"));
        plateau.best = std::stod(meta("train.plateau_best"));
        plateau.bad_epochs = std::stoi(meta("train.plateau_bad"));
        if (fs::exists(metrics_path)) series = read_metrics_csv(metrics_path);
        if (!series.empty() && series.back().epoch != start_epoch) {
            throw TrainingError("resume: metrics.csv does not end at checkpoint epoch");
        }
    }

    auto train_metadata = [&](int epoch) {
        std::map<std::string, std::string> m;
        m["train.seed"] = std::to_string(tcfg.seed);
        m["train.val_fraction"] = csv::fmt_exact(tcfg.val_fraction);
        m["train.noise_max"] = csv::fmt_exact(data.scales.noise_max);
        m["data.image_size"] = csv::fmt_exact(data.scales.image_size);
        m["data.width_max"] = csv::fmt_exact(data.scales.width_max);
        m["train.epoch"] = std::to_string(epoch);
        m["train.lr"] = csv::fmt_exact(lr);
        m["train.adam_step"] = std::to_string(adam.step);
        m["train.best_val"] = csv::fmt_exact(stopper.best);
        m["train.best_epoch"] = std::to_string(stopper.best_epoch);
        m["train.bad_epochs"] = std::to_string(stopper.bad_epochs);
        m["train.plateau_best"] = csv::fmt_exact(plateau.best);
        m["train.plateau_bad"] = std::to_string(plateau.bad_epochs);
        return m;
    };

    FitResult result;
    result.best_checkpoint = best_path;
    result.last_checkpoint = last_path;

    const int n_train = static_cast<int>(split.train.size());

    for (int epoch = start_epoch + 1; epoch <= tcfg.max_epochs; ++epoch) {
        // Per-epoch shuffle, seeded independently of the split (index 0) and
        // derived from the pristine train list so epoch N's order does not
        // depend on earlier epochs (resume reproduces a one-shot run).
        std::vector<int> order = split.train;
        SplitMix64 rng(mix_seed(tcfg.seed, static_cast<uint64_t>(epoch)));
        for (int i = n_train - 1; i > 0; --i) {
            int j = static_cast<int>(rng.next_below(static_cast<uint64_t>(i) + 1));
            std::swap(order[i], order[j]);
        }

        double loss_sum = 0;
        for (int b = 0; b < n_train; b += tcfg.batch_size) {
            int e = std::min(n_train, b + tcfg.batch_size);
            Eigen::MatrixXd imgs = gather_images(data, order, b, e);
            TaskTargets tgts = gather_targets(data, order, b, e);
            LossGrads lg = backward(params, imgs, tgts, tcfg.loss_weights,
                                    tcfg.huber_delta, tcfg.threads);
            if (!std::isfinite(lg.loss)) {
                throw TrainingError("fit: non-finite loss at epoch " +
                                    std::to_string(epoch) + ", batch " +
                                    std::to_string(b / tcfg.batch_size));
            }
            adamw_step(params, lg.grads, adam, lr, tcfg);
            loss_sum += lg.loss * (e - b);
        }
        double train_loss = loss_sum / n_train;

        ValResult val = run_validation(params, data, split.val, tcfg);

        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = train_loss;
        em.val_loss = val.loss;
        em.lr = lr;
        em.rho = val.rho;
        em.inference_ms = val.mean_batch_ms;
        series.push_back(em);

        if (verbose) {
            std::cout << "epoch " << epoch << " train_loss " << csv::fmt(train_loss, 6)
                      << " val_loss " << csv::fmt(val.loss, 6) << " lr "
                      << csv::fmt_exact(lr);
            for (const auto& [task, r] : val.rho) {
                std::cout << " rho_" << targets::task_name(task) << " " << csv::fmt(r, 4);
            }
            std::cout << "\n" << std::flush;
        }

        bool stop = early_stop_update(stopper, epoch, val.loss, tcfg);
        bool is_best = stopper.best_epoch == epoch;
        lr = plateau_step(plateau, val.loss, lr, tcfg);

        if (is_best) {
            vit::save_checkpoint(best_path, params, train_metadata(epoch));
        }
        vit::save_checkpoint(last_path, params, train_metadata(epoch),
                             adam_to_extra(adam));
        write_metrics_csv(metrics_path, series);

        if (stop) {
            result.early_stopped = true;
            break;
        }
    }

    result.series = std::move(series);
    result.best_epoch = stopper.best_epoch;
    result.best_val = stopper.best;
    return result;
}

std::vector<TimingStat> measure_inference_time(const ModelParams& params,
                                               const std::vector<int>& batch_sizes,
                                               int warmup, int reps, uint64_t seed) {
    const auto px = static_cast<Eigen::Index>(params.cfg.image_size) *
                    params.cfg.image_size * 3;
    std::vector<TimingStat> stats;
    SplitMix64 rng(mix_seed(seed, 42));
    for (int bs : batch_sizes) {
        Eigen::MatrixXd imgs(bs, px);
        for (Eigen::Index i = 0; i < imgs.size(); ++i) imgs.data()[i] = rng.next_double();
        for (int w = 0; w < warmup; ++w) vit::forward(params, imgs);
        std::vector<double> times;
        times.reserve(static_cast<std::size_t>(reps));
        for (int r = 0; r < reps; ++r) {
            auto t0 = std::chrono::steady_clock::now();
            vit::forward(params, imgs);
            auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        TimingStat s;
        s.batch_size = bs;
        s.median_ms = analysis::percentile(times, 50.0);
        s.q1_ms = analysis::percentile(times, 25.0);
        s.q3_ms = analysis::percentile(times, 75.0);
        s.reps = reps;
        stats.push_back(s);
    }
    return stats;
}

} // namespace linevit::train
