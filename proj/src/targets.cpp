#include "linevit/targets.hpp"

#include <algorithm>
#include <cmath>

namespace linevit::targets {

const std::vector<Task>& tasks_for(DatasetVariant v) {
    static const std::vector<Task> t1 = {Task::angle, Task::coords, Task::noise};
    static const std::vector<Task> t2 = {Task::angle, Task::coords, Task::noise,
                                         Task::length};
    static const std::vector<Task> t3 = {Task::angle, Task::coords, Task::noise,
                                         Task::length, Task::width};
    static const std::vector<Task> t4 = {Task::angle, Task::coords, Task::noise,
                                         Task::length, Task::width, Task::color};
    switch (v) {
        case DatasetVariant::I: return t1;
        case DatasetVariant::II: return t2;
        case DatasetVariant::III: return t3;
        case DatasetVariant::IV: return t4;
    }
    return t1;
}

int task_dim(Task t) {
    switch (t) {
        case Task::coords: return 4;
        case Task::color: return 3;
        default: return 1;
    }
}

std::string task_name(Task t) {
    switch (t) {
        case Task::angle: return "angle";
        case Task::coords: return "coords";
        case Task::noise: return "noise";
        case Task::length: return "length";
        case Task::width: return "width";
        case Task::color: return "color";
    }
    return "?";
}

Task parse_task(const std::string& name) {
    for (Task t : {Task::angle, Task::coords, Task::noise, Task::length, Task::width,
                   Task::color}) {
        if (task_name(t) == name) return t;
    }
    throw ValidationError("targets: unknown task '" + name + "'");
}

namespace {

double euclidean_mod(double x, double m) {
    double r = std::fmod(x, m);
    return r < 0 ? r + m : r;
}

void check_range(double v, double lo, double hi, const char* field) {
    if (!(v >= lo && v <= hi) || !std::isfinite(v)) {
        throw ValidationError(std::string("targets: field '") + field + "' value " +
                              std::to_string(v) + " outside [" + std::to_string(lo) +
                              ", " + std::to_string(hi) + "]");
    }
}

} // namespace

NormalizedTargets normalize(const SampleRecord& rec, DatasetVariant v,
                            const NormScales& scales) {
    if (!std::isfinite(rec.angle_deg)) {
        throw ValidationError("targets: field 'angle_deg' is not finite");
    }
    check_range(rec.x1, 0, scales.image_size, "x1");
    check_range(rec.y1, 0, scales.image_size, "y1");
    check_range(rec.x2, 0, scales.image_size, "x2");
    check_range(rec.y2, 0, scales.image_size, "y2");
    check_range(rec.noise_level, 0, scales.noise_max, "noise_level");
    check_range(rec.length, 0, scales.image_size, "length");
    check_range(rec.width, 0, scales.width_max, "width");
    for (int c : rec.color_rgb) check_range(c, 0, 255, "color_rgb");

    NormalizedTargets t;
    t.angle = euclidean_mod(rec.angle_deg, 360.0) / 180.0 - 1.0;
    t.coords = {rec.x1 / scales.image_size, rec.y1 / scales.image_size,
                rec.x2 / scales.image_size, rec.y2 / scales.image_size};
    t.noise = rec.noise_level / scales.noise_max;
    t.length = rec.length / scales.image_size;
    t.width = rec.width / scales.width_max;
    t.color = {rec.color_rgb[0] / 255.0, rec.color_rgb[1] / 255.0,
               rec.color_rgb[2] / 255.0};
    (void)v; // all fields are populated regardless of variant
    return t;
}

DenormalizedFields denormalize(const NormalizedTargets& t, DatasetVariant v,
                               const NormScales& scales) {
    DenormalizedFields out;
    auto clamp_unit = [&out](double x, double lo, double hi) {
        if (x < lo || x > hi || !std::isfinite(x)) {
            out.clamped = true;
            if (!std::isfinite(x)) return lo;
            return std::clamp(x, lo, hi);
        }
        return x;
    };

    double a = clamp_unit(t.angle, -1.0, 1.0);
    out.angle_deg = (a + 1.0) * 180.0;
    if (out.angle_deg >= 360.0) out.angle_deg = 0.0; // angle +1 aliases angle -1

    out.x1 = clamp_unit(t.coords[0], 0.0, 1.0) * scales.image_size;
    out.y1 = clamp_unit(t.coords[1], 0.0, 1.0) * scales.image_size;
    out.x2 = clamp_unit(t.coords[2], 0.0, 1.0) * scales.image_size;
    out.y2 = clamp_unit(t.coords[3], 0.0, 1.0) * scales.image_size;
    out.noise_level = clamp_unit(t.noise, 0.0, 1.0) * scales.noise_max;
    out.length = clamp_unit(t.length, 0.0, 1.0) * scales.image_size;
    out.width = clamp_unit(t.width, 0.0, 1.0) * scales.width_max;
    out.color = {clamp_unit(t.color[0], 0.0, 1.0) * 255.0,
                 clamp_unit(t.color[1], 0.0, 1.0) * 255.0,
                 clamp_unit(t.color[2], 0.0, 1.0) * 255.0};
    (void)v;
    return out;
}

} // namespace linevit::targets
