#pragma once

#include "linevit/synthgen.hpp"

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace linevit::targets {

using gen::DatasetVariant;
using gen::SampleRecord;

// Regression tasks in canonical order. Dataset I uses {angle, coords, noise};
// each later variant appends the next entry.
enum class Task { angle, coords, noise, length, width, color };

const std::vector<Task>& tasks_for(DatasetVariant v);
int task_dim(Task t);
std::string task_name(Task t);
Task parse_task(const std::string& name);

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Denominators for the unit-interval targets. image_size covers both the
// coordinate and length scales (224 reproduces the reference protocol
// exactly); noise_max and width_max are the top of their sampled ranges.
struct NormScales {
    double image_size = 224.0;
    double noise_max = 0.3;
    double width_max = 5.0;
};

// angle in [-1, 1]; everything else in [0, 1]. Fields a variant does not
// vary still carry the fixed value's normalization, never a hole.
struct NormalizedTargets {
    double angle = 0.0;
    std::array<double, 4> coords{}; // x1, y1, x2, y2
    double noise = 0.0;
    double length = 0.0;
    double width = 0.0;
    std::array<double, 3> color{};
};

// angle = ((angle_deg mod 360) / 180) - 1, coordinates / image_size,
// noise / noise_max, length / image_size, width / width_max, color / 255.
// Throws ValidationError naming the offending field on out-of-range input.
NormalizedTargets normalize(const SampleRecord& rec, DatasetVariant v,
                            const NormScales& scales = {});

struct DenormalizedFields {
    double angle_deg = 0.0; // [0, 360)
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    double noise_level = 0.0;
    double length = 0.0;
    double width = 0.0;
    std::array<double, 3> color{};
    bool clamped = false; // some input was outside its declared range
};

// Inverse maps. Out-of-range inputs (e.g. numeric edge cases from a model
// head) are clamped into range first and flagged, never rejected.
DenormalizedFields denormalize(const NormalizedTargets& t, DatasetVariant v,
                               const NormScales& scales = {});

} // namespace linevit::targets
