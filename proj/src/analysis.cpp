#include "linevit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace linevit::analysis {

double percentile(std::vector<double> values, double p) {
    if (values.empty()) throw AnalysisError("percentile: empty input");
    std::sort(values.begin(), values.end());
    if (values.size() == 1) return values[0];
    double rank = p / 100.0 * static_cast<double>(values.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(rank));
    auto hi = static_cast<std::size_t>(std::ceil(rank));
    double frac = rank - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

double circular_angle_error(double pred_deg, double true_deg) {
    double d = std::fmod(std::abs(pred_deg - true_deg), 360.0);
    return std::min(d, 360.0 - d);
}

double axial_angle_error(double pred_deg, double true_deg) {
    double d = circular_angle_error(pred_deg, true_deg);
    return std::min(d, 180.0 - d);
}

std::vector<ErrorRecord> build_error_records(
    const csv::Table& predictions, const std::vector<gen::SampleRecord>& manifest) {
    predictions.require_columns({"image_id", "pred_angle_deg"});
    std::map<std::string, const gen::SampleRecord*> by_id;
    for (const auto& rec : manifest) by_id[rec.image_id] = &rec;

    std::vector<ErrorRecord> out;
    out.reserve(predictions.rows.size());
    for (std::size_t i = 0; i < predictions.rows.size(); ++i) {
        const std::string& id = predictions.cell(i, "image_id");
        auto it = by_id.find(id);
        if (it == by_id.end()) {
            throw AnalysisError("join: image_id '" + id + "' not in manifest");
        }
        const gen::SampleRecord& m = *it->second;
        ErrorRecord er;
        er.image_id = id;
        er.true_angle_deg = m.angle_deg;
        er.pred_angle_deg = predictions.num(i, "pred_angle_deg");
        er.angle_error_deg = circular_angle_error(er.pred_angle_deg, er.true_angle_deg);
        er.length = m.length;
        er.width = m.width;
        er.noise_level = m.noise_level;
        er.color_name = m.color_name;
        out.push_back(std::move(er));
    }
    return out;
}

namespace {

BinStat stat_from(std::vector<double> errors) {
    BinStat b;
    b.n = static_cast<int>(errors.size());
    if (b.n == 0) return b;
    b.mean = std::accumulate(errors.begin(), errors.end(), 0.0) / b.n;
    b.median = percentile(errors, 50.0);
    b.q1 = percentile(errors, 25.0);
    b.q3 = percentile(errors, 75.0);
    b.p75 = b.q3;
    return b;
}

std::string range_label(double lo, double hi) {
    auto trim = [](double v) {
        std::string s = csv::fmt(v, 1);
        if (s.size() > 2 && s.substr(s.size() - 2) == ".0") s.resize(s.size() - 2);
        return s;
    };
    return trim(lo) + "-" + trim(hi);
}

} // namespace

std::vector<BinStat> angle_bin_profile(const std::vector<ErrorRecord>& records,
                                       double bin_width_deg) {
    if (bin_width_deg <= 0 ||
        std::abs(std::round(360.0 / bin_width_deg) * bin_width_deg - 360.0) > 1e-9) {
        throw AnalysisError("angle_bin_profile: bin width must divide 360");
    }
    // Bins centered on 0, w, 2w, ... so a profile minimum at an axis angle
    // (e.g. 180) falls inside one bin instead of straddling an edge; bin 0
    // wraps across 360.
    int n_bins = static_cast<int>(std::round(360.0 / bin_width_deg));
    std::vector<std::vector<double>> buckets(static_cast<std::size_t>(n_bins));
    for (const auto& r : records) {
        double a = std::fmod(r.true_angle_deg, 360.0);
        if (a < 0) a += 360.0;
        int b = static_cast<int>(std::lround(a / bin_width_deg)) % n_bins;
        buckets[static_cast<std::size_t>(b)].push_back(r.angle_error_deg);
    }
    std::vector<BinStat> out;
    out.reserve(static_cast<std::size_t>(n_bins));
    for (int b = 0; b < n_bins; ++b) {
        BinStat s = stat_from(std::move(buckets[static_cast<std::size_t>(b)]));
        s.center = b * bin_width_deg;
        s.lo = s.center - bin_width_deg / 2.0; // negative lo on bin 0 marks the wrap
        s.hi = s.center + bin_width_deg / 2.0;
        s.label = range_label(s.lo, s.hi);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<BinStat> length_bin_stats(const std::vector<ErrorRecord>& records,
                                      double lo, double hi, double width) {
    if (!(hi > lo) || width <= 0) throw AnalysisError("length_bin_stats: bad bin scheme");
    int n_bins = static_cast<int>(std::round((hi - lo) / width));
    if (n_bins < 1) throw AnalysisError("length_bin_stats: bad bin scheme");
    std::vector<std::vector<double>> buckets(n_bins);
    for (const auto& r : records) {
        if (r.length < lo || r.length > hi) {
            throw AnalysisError("length_bin_stats: length " + std::to_string(r.length) +
                                " outside [" + std::to_string(lo) + ", " +
                                std::to_string(hi) + "]");
        }
        // Right-exclusive except the last bin.
        int b = std::min(n_bins - 1, static_cast<int>((r.length - lo) / width));
        buckets[b].push_back(r.angle_error_deg);
    }
    std::vector<BinStat> out;
    out.reserve(static_cast<std::size_t>(n_bins));
    for (int b = 0; b < n_bins; ++b) {
        BinStat s = stat_from(std::move(buckets[b]));
        s.lo = lo + b * width;
        s.hi = lo + (b + 1) * width;
        s.center = (s.lo + s.hi) / 2.0;
        s.label = range_label(s.lo, s.hi);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<HexBin> hexbin(const std::vector<std::pair<double, double>>& points,
                           const Extent& extent, int gridsize) {
    if (gridsize < 1) throw AnalysisError("hexbin: gridsize must be >= 1");
    if (!(extent.xmax > extent.xmin) || !(extent.ymax > extent.ymin)) {
        throw AnalysisError("hexbin: degenerate extent");
    }
    const double dx = (extent.xmax - extent.xmin) / gridsize;
    const double dy = dx * std::sqrt(3.0) / 2.0; // row spacing of the hex lattice

    struct Key {
        long iy, ix;
        bool operator<(const Key& o) const {
            return iy != o.iy ? iy < o.iy : ix < o.ix;
        }
    };
    auto center_of = [&](const Key& k) {
        double off = (k.iy % 2 != 0) ? dx / 2.0 : 0.0;
        return std::pair<double, double>{extent.xmin + k.ix * dx + off,
                                         extent.ymin + k.iy * dy};
    };

    std::map<Key, int> counts;
    for (const auto& [x, y] : points) {
        double ry = (y - extent.ymin) / dy;
        Key best{0, 0};
        double best_d2 = std::numeric_limits<double>::infinity();
        for (long iy = static_cast<long>(std::floor(ry)); iy <= static_cast<long>(std::ceil(ry)); ++iy) {
            double off = (iy % 2 != 0) ? dx / 2.0 : 0.0;
            double rx = (x - extent.xmin - off) / dx;
            for (long ix = static_cast<long>(std::floor(rx)); ix <= static_cast<long>(std::ceil(rx)); ++ix) {
                Key k{iy, ix};
                auto [cx, cy] = center_of(k);
                double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                if (d2 < best_d2 || (d2 == best_d2 && k < best)) {
                    best_d2 = d2;
                    best = k;
                }
            }
        }
        ++counts[best];
    }

    std::vector<HexBin> out;
    out.reserve(counts.size());
    for (const auto& [k, c] : counts) {
        auto [cx, cy] = center_of(k);
        out.push_back({k.ix, k.iy, cx, cy, c});
    }
    return out;
}

std::vector<GroupStat> group_stats(const std::vector<ErrorRecord>& records, GroupBy key) {
    std::map<std::string, std::vector<double>> groups;
    for (const auto& r : records) {
        std::string g;
        switch (key) {
            case GroupBy::width: g = std::to_string(r.width); break;
            case GroupBy::color: g = r.color_name; break;
            case GroupBy::noise_level: g = csv::fmt(r.noise_level, 1); break;
        }
        groups[g].push_back(r.angle_error_deg);
    }
    std::vector<GroupStat> out;
    out.reserve(groups.size());
    for (auto& [g, errs] : groups) {
        GroupStat s;
        s.group = g;
        s.n = static_cast<int>(errs.size());
        s.mean = std::accumulate(errs.begin(), errs.end(), 0.0) / s.n;
        s.median = percentile(errs, 50.0);
        s.p75 = percentile(errs, 75.0);
        out.push_back(std::move(s));
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const GroupStat& a, const GroupStat& b) { return a.median < b.median; });
    return out;
}

ClusterAssignment kmeans_1d(const std::vector<std::pair<std::string, double>>& labeled,
                            int k) {
    const int n = static_cast<int>(labeled.size());
    if (k < 1) throw AnalysisError("kmeans_1d: k must be >= 1");
    if (n < k) throw AnalysisError("kmeans_1d: need at least k values");

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&labeled](int a, int b) {
        return labeled[a].second < labeled[b].second;
    });
    std::vector<double> v(n);
    for (int i = 0; i < n; ++i) v[i] = labeled[order[i]].second;

    // Prefix sums for O(1) within-segment cost: cost(a..b) = sum x^2 - (sum x)^2 / m.
    std::vector<double> s1(n + 1, 0), s2(n + 1, 0);
    for (int i = 0; i < n; ++i) {
        s1[i + 1] = s1[i] + v[i];
        s2[i + 1] = s2[i] + v[i] * v[i];
    }
    auto seg_cost = [&](int a, int b) { // values [a, b), b > a
        double m = b - a;
        double sum = s1[b] - s1[a];
        return (s2[b] - s2[a]) - sum * sum / m;
    };

    const double inf = std::numeric_limits<double>::infinity();
    // dp[j][i]: optimal cost of the first i values in j clusters.
    std::vector<std::vector<double>> dp(k + 1, std::vector<double>(n + 1, inf));
    std::vector<std::vector<int>> cut(k + 1, std::vector<int>(n + 1, 0));
    dp[0][0] = 0;
    for (int j = 1; j <= k; ++j) {
        for (int i = j; i <= n; ++i) {
            for (int a = j - 1; a < i; ++a) {
                if (dp[j - 1][a] == inf) continue;
                double c = dp[j - 1][a] + seg_cost(a, i);
                if (c < dp[j][i]) {
                    dp[j][i] = c;
                    cut[j][i] = a;
                }
            }
        }
    }

    ClusterAssignment out;
    out.k = k;
    out.wcss = dp[k][n];
    out.cluster_of.assign(n, 0);
    out.members.resize(k);
    out.centers.resize(k);
    int end = n;
    std::vector<std::pair<int, int>> segments(k); // [begin, end) in sorted order
    for (int j = k; j >= 1; --j) {
        int begin = cut[j][end];
        segments[j - 1] = {begin, end};
        end = begin;
    }
    for (int j = 0; j < k; ++j) {
        auto [a, b] = segments[j];
        out.centers[j] = (s1[b] - s1[a]) / (b - a);
        for (int i = a; i < b; ++i) {
            out.cluster_of[order[i]] = j;
            out.members[j].push_back(labeled[order[i]].first);
        }
    }
    return out;
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw AnalysisError("pearson: size mismatch");
    const std::size_t n = x.size();
    if (n < 2) throw UndefinedCorrelationError("pearson: need at least 2 points");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0 || syy == 0) {
        throw UndefinedCorrelationError("pearson: zero variance");
    }
    return sxy / std::sqrt(sxx * syy);
}

std::vector<double> moving_average(const std::vector<double>& series, int window) {
    if (window < 1) throw AnalysisError("moving_average: window must be >= 1");
    const int n = static_cast<int>(series.size());
    const int h = window / 2;
    std::vector<double> out(series.size());
    for (int i = 0; i < n; ++i) {
        int lo = std::max(0, i - h);
        int hi = std::min(n - 1, i + h);
        double s = 0;
        for (int j = lo; j <= hi; ++j) s += series[static_cast<std::size_t>(j)];
        out[static_cast<std::size_t>(i)] = s / (hi - lo + 1);
    }
    return out;
}

std::vector<PhaseEvent> detect_phase_transitions(const std::vector<double>& series,
                                                 int smooth_window,
                                                 double min_prominence) {
    const int n = static_cast<int>(series.size());
    if (n <= smooth_window) {
        throw AnalysisError("detect_phase_transitions: series shorter than window");
    }
    if (min_prominence < 0) {
        double mx = *std::max_element(series.begin(), series.end());
        double mn = *std::min_element(series.begin(), series.end());
        min_prominence = 0.02 * (mx - mn);
    }
    std::vector<double> s = moving_average(series, smooth_window);

    int global_max = 0;
    for (int i = 1; i < n; ++i) {
        if (s[i] > s[global_max]) global_max = i;
    }

    std::vector<PhaseEvent> events;
    for (int i = global_max + 1; i + 1 < n; ++i) {
        if (!(s[i] > s[i - 1] && s[i] > s[i + 1])) continue;
        // Topographic prominence: lowest point on each side before terrain
        // rises above the peak (or the series ends).
        double left_min = s[i];
        for (int j = i - 1; j >= 0; --j) {
            if (s[j] > s[i]) break;
            left_min = std::min(left_min, s[j]);
        }
        double right_min = s[i];
        for (int j = i + 1; j < n; ++j) {
            if (s[j] > s[i]) break;
            right_min = std::min(right_min, s[j]);
        }
        double prominence = s[i] - std::max(left_min, right_min);
        if (prominence >= min_prominence) {
            events.push_back({i, prominence});
        }
    }
    return events;
}

CorrelationDynamics correlation_dynamics(const MetricSeries& series, int smooth_window,
                                         double min_prominence, int align_window) {
    if (series.empty()) throw AnalysisError("correlation_dynamics: empty series");
    CorrelationDynamics out;
    const auto& tasks = series.front().rho;
    for (const auto& [task, _] : tasks) out.rho[task] = {};
    std::vector<double> train_loss;
    train_loss.reserve(series.size());
    for (const auto& em : series) {
        train_loss.push_back(em.train_loss);
        for (auto& [task, vec] : out.rho) {
            auto it = em.rho.find(task);
            if (it == em.rho.end()) {
                throw AnalysisError("correlation_dynamics: epoch " +
                                    std::to_string(em.epoch) + " missing task rho_" +
                                    targets::task_name(task));
            }
            vec.push_back(it->second);
        }
    }
    out.loss_events = detect_phase_transitions(train_loss, smooth_window, min_prominence);

    const int n = static_cast<int>(series.size());
    for (const auto& ev : out.loss_events) {
        for (const auto& [task, vec] : out.rho) {
            int best_epoch = -1;
            double best_jump = 0;
            int lo = std::max(1, ev.epoch - align_window);
            int hi = std::min(n - 1, ev.epoch + align_window);
            for (int e = lo; e <= hi; ++e) {
                double jump = vec[static_cast<std::size_t>(e)] -
                              vec[static_cast<std::size_t>(e - 1)];
                if (std::abs(jump) > std::abs(best_jump)) {
                    best_jump = jump;
                    best_epoch = e;
                }
            }
            if (best_epoch >= 0 && best_jump != 0.0) {
                out.aligned_jumps.push_back({ev.epoch, task, best_epoch, best_jump});
            }
        }
    }
    return out;
}

} // namespace linevit::analysis
