#pragma once

#include "linevit/targets.hpp"

#include <map>
#include <string>
#include <vector>

namespace linevit {

// One training epoch's log line. rho holds the per-task validation Pearson
// correlations (multi-dim tasks averaged per component). inference_ms is
// wall-clock and therefore excluded from the determinism contract and from
// reproducibility hashes.
struct EpochMetrics {
    int epoch = 0; // 1-based
    double train_loss = 0;
    double val_loss = 0;
    double lr = 0;
    std::map<targets::Task, double> rho;
    double inference_ms = 0; // mean forward wall time per validation batch
};

using MetricSeries = std::vector<EpochMetrics>;

// CSV columns: epoch,train_loss,val_loss,lr,rho_<task>...,inference_ms.
void write_metrics_csv(const std::string& path, const MetricSeries& series);
MetricSeries read_metrics_csv(const std::string& path);

} // namespace linevit
