#pragma once

#include "linevit/csv.hpp"
#include "linevit/metrics.hpp"
#include "linevit/synthgen.hpp"

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace linevit::analysis {

using targets::Task;

struct UndefinedCorrelationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct AnalysisError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// The one percentile definition used project-wide: linear interpolation
// between closest ranks, inclusive (rank = p/100 * (n-1)). p75 of {1,2,3,4}
// is 3.25.
double percentile(std::vector<double> values, double p);

// min(|d| mod 360, 360 - |d| mod 360), in [0, 180].
double circular_angle_error(double pred_deg, double true_deg);

// Optional secondary metric folding the 180-degree symmetry of an unmarked
// segment; never the default anywhere.
double axial_angle_error(double pred_deg, double true_deg);

// One evaluated sample: prediction joined to its ground-truth attributes.
struct ErrorRecord {
    std::string image_id;
    double true_angle_deg = 0;
    double pred_angle_deg = 0;
    double angle_error_deg = 0; // circular difference
    double length = 0;
    int width = 0;
    double noise_level = 0;
    std::string color_name;
};

// Joins a predictions table (image_id, pred_angle_deg, ...) to the dataset
// manifest by image_id. Unknown ids are an error.
std::vector<ErrorRecord> build_error_records(const csv::Table& predictions,
                                             const std::vector<gen::SampleRecord>& manifest);

struct BinStat {
    std::string label;
    double lo = 0, hi = 0;     // bin edges (right-exclusive except last)
    double center = 0;
    int n = 0;
    double mean = 0, median = 0, q1 = 0, q3 = 0, p75 = 0;
};

// Angle-error stats per orientation bin over [0, 360); bin_width_deg must
// divide 360. Empty bins report n = 0 and no stats.
std::vector<BinStat> angle_bin_profile(const std::vector<ErrorRecord>& records,
                                       double bin_width_deg);

// Ten length bins by default (20-28px ... 92-100px at reference scale).
std::vector<BinStat> length_bin_stats(const std::vector<ErrorRecord>& records,
                                      double lo = 20, double hi = 100, double width = 8);

struct Extent {
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
};
struct HexBin {
    long ix = 0, iy = 0; // lattice index (column, row)
    double cx = 0, cy = 0;
    int count = 0;
};
// Pointy-top hexagonal binning: each point goes to the nearest lattice
// center, ties broken toward the lexicographically smaller (iy, ix). The sum
// of counts always equals the number of points.
std::vector<HexBin> hexbin(const std::vector<std::pair<double, double>>& points,
                           const Extent& extent, int gridsize);

enum class GroupBy { width, color, noise_level };
struct GroupStat {
    std::string group;
    int n = 0;
    double mean = 0, median = 0, p75 = 0;
};
// Angle-error stats per group, sorted by median ascending.
std::vector<GroupStat> group_stats(const std::vector<ErrorRecord>& records, GroupBy key);

struct ClusterAssignment {
    int k = 0;
    std::vector<int> cluster_of;       // per input index, ids ordered by value
    std::vector<std::vector<std::string>> members; // labels per cluster
    std::vector<double> centers;       // cluster means
    double wcss = 0;                   // within-cluster sum of squares
};
// Globally optimal 1-D k-means via dynamic programming over sorted values.
ClusterAssignment kmeans_1d(const std::vector<std::pair<std::string, double>>& labeled,
                            int k);

// Sample Pearson correlation; throws UndefinedCorrelationError on n < 2 or
// zero variance rather than returning 0.
double pearson(std::span<const double> x, std::span<const double> y);

struct PhaseEvent {
    int epoch = 0;      // index into the series
    double prominence = 0;
};

std::vector<double> moving_average(const std::vector<double>& series, int window);

// Bumps on a descending loss curve: local maxima of the smoothed series
// after its global maximum whose topographic prominence reaches
// min_prominence. A negative min_prominence selects the default, 2% of the
// raw series' max-min range.
std::vector<PhaseEvent> detect_phase_transitions(const std::vector<double>& series,
                                                 int smooth_window = 5,
                                                 double min_prominence = -1.0);

struct RhoJump {
    int event_epoch = 0; // loss bump location
    Task task;
    int jump_epoch = 0;  // epoch whose step from epoch-1 is largest
    double jump = 0;     // signed step
};
struct CorrelationDynamics {
    std::map<Task, std::vector<double>> rho; // per-task trajectory by epoch
    std::vector<PhaseEvent> loss_events;     // on the train loss
    std::vector<RhoJump> aligned_jumps;
};
// Emits per-task correlation trajectories, detects train-loss bumps, and for
// each bump reports the largest single-epoch jump of every trajectory within
// +/- align_window epochs. Zero-magnitude jumps are not reported.
CorrelationDynamics correlation_dynamics(const MetricSeries& series,
                                         int smooth_window = 5,
                                         double min_prominence = -1.0,
                                         int align_window = 5);

} // namespace linevit::analysis
