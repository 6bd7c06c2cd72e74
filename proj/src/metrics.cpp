#include "linevit/metrics.hpp"

#include "linevit/csv.hpp"

#include <stdexcept>

namespace linevit {

using targets::Task;

void write_metrics_csv(const std::string& path, const MetricSeries& series) {
    if (series.empty()) throw std::runtime_error("metrics: empty series");
    csv::Table t;
    t.header = {"epoch", "train_loss", "val_loss", "lr"};
    std::vector<Task> tasks;
    for (const auto& [task, _] : series.front().rho) tasks.push_back(task);
    for (Task task : tasks) t.header.push_back("rho_" + targets::task_name(task));
    t.header.push_back("inference_ms");

    for (const auto& m : series) {
        std::vector<std::string> row = {std::to_string(m.epoch),
                                        csv::fmt_exact(m.train_loss),
                                        csv::fmt_exact(m.val_loss),
                                        csv::fmt_exact(m.lr)};
        for (Task task : tasks) {
            auto it = m.rho.find(task);
            if (it == m.rho.end()) {
                throw std::runtime_error("metrics: epoch " + std::to_string(m.epoch) +
                                         " missing task " + targets::task_name(task));
            }
            row.push_back(csv::fmt_exact(it->second));
        }
        row.push_back(csv::fmt(m.inference_ms, 3));
        t.rows.push_back(std::move(row));
    }
    csv::write_csv(path, t);
}

MetricSeries read_metrics_csv(const std::string& path) {
    csv::Table t = csv::read_csv(path);
    t.require_columns({"epoch", "train_loss", "val_loss", "lr", "inference_ms"});
    std::vector<std::pair<Task, std::string>> rho_cols;
    for (const auto& h : t.header) {
        if (h.rfind("rho_", 0) == 0) {
            rho_cols.emplace_back(targets::parse_task(h.substr(4)), h);
        }
    }
    MetricSeries out;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        EpochMetrics m;
        m.epoch = static_cast<int>(t.num(i, "epoch"));
        m.train_loss = t.num(i, "train_loss");
        m.val_loss = t.num(i, "val_loss");
        m.lr = t.num(i, "lr");
        for (const auto& [task, col] : rho_cols) m.rho[task] = t.num(i, col);
        m.inference_ms = t.num(i, "inference_ms");
        out.push_back(std::move(m));
    }
    return out;
}

} // namespace linevit
