#include "linevit/cli.hpp"

#include "linevit/analysis.hpp"
#include "linevit/hash.hpp"
#include "linevit/report.hpp"
#include "linevit/version.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace linevit::cli {

using targets::Task;

namespace {

gen::DatasetVariant variant_from(const Config& cfg, const std::string& key) {
    std::string s = cfg.get_str(key, "I");
    auto v = gen::parse_variant(s);
    if (!v) throw ConfigError("invalid variant '" + s + "' (expected I, II, III or IV)");
    return *v;
}

std::vector<gen::PaletteEntry> parse_palette(const std::string& s) {
    // "red:255:0:0;green:0:255:0;..."
    std::vector<gen::PaletteEntry> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ';')) {
        std::stringstream es(item);
        std::string name, r, g, b;
        if (!std::getline(es, name, ':') || !std::getline(es, r, ':') ||
            !std::getline(es, g, ':') || !std::getline(es, b, ':')) {
            throw ConfigError("gen.palette: expected name:r:g:b entries, got '" + item + "'");
        }
        out.push_back({name,
                       {static_cast<uint8_t>(std::stoi(r)), static_cast<uint8_t>(std::stoi(g)),
                        static_cast<uint8_t>(std::stoi(b))}});
    }
    if (out.empty()) throw ConfigError("gen.palette: empty palette");
    return out;
}

} // namespace

std::string dataset_dir(const Config& cfg) {
    return cfg.get_str("gen.out", "out/dataset");
}
std::string train_dir(const Config& cfg) {
    return cfg.get_str("train.out", "out/train");
}
std::string eval_dir(const Config& cfg) {
    return cfg.get_str("eval.out", "out/eval");
}
std::string stats_dir(const Config& cfg) {
    return cfg.get_str("analyze.out", "out/stats");
}
std::string figures_dir(const Config& cfg) {
    return cfg.get_str("report.out", "out/figures");
}

gen::GenConfig make_gen_config(const Config& cfg) {
    gen::GenConfig g;
    g.variant = variant_from(cfg, "gen.variant");
    g.n_images = cfg.get_int("gen.n_images", g.n_images);
    g.base_seed = cfg.get_u64("gen.seed", g.base_seed);
    g.output_dir = dataset_dir(cfg);
    g.image_size = cfg.get_int("gen.image_size", g.image_size);

    // Geometry defaults scale with canvas size so smaller canvases keep the
    // reference protocol's proportions; explicit keys override.
    double s = g.image_size / 224.0;
    g.fixed_length = cfg.get_double("gen.fixed_length", 50.0 * s);
    g.length_min = cfg.get_double("gen.length_min", 20.0 * s);
    g.length_max = cfg.get_double("gen.length_max", 100.0 * s);
    g.fixed_width = cfg.get_int("gen.fixed_width", g.fixed_width);
    g.width_min = cfg.get_int("gen.width_min", g.width_min);
    g.width_max = cfg.get_int("gen.width_max", g.width_max);
    g.noise_levels = cfg.get_doubles("gen.noise_levels", g.noise_levels);
    if (cfg.has("gen.palette")) g.palette = parse_palette(cfg.get_str("gen.palette", ""));
    g.validate();
    return g;
}

vit::ModelConfig make_model_config(const Config& cfg, gen::DatasetVariant variant,
                                   int image_size) {
    vit::ModelConfig m;
    m.image_size = image_size;
    m.patch_size = cfg.get_int("model.patch_size", m.patch_size);
    m.d_model = cfg.get_int("model.d_model", m.d_model);
    m.n_layers = cfg.get_int("model.n_layers", m.n_layers);
    m.n_heads = cfg.get_int("model.n_heads", m.n_heads);
    m.mlp_ratio = cfg.get_double("model.mlp_ratio", m.mlp_ratio);
    m.lora_rank = cfg.get_int("model.lora_rank", m.lora_rank);
    m.lora_alpha = cfg.get_double("model.lora_alpha", static_cast<double>(m.lora_rank));
    m.lora_q = cfg.get_bool("model.lora_q", true);
    m.lora_k = cfg.get_bool("model.lora_k", true);
    m.lora_v = cfg.get_bool("model.lora_v", true);
    m.lora_o = cfg.get_bool("model.lora_o", true);
    m.freeze_backbone = cfg.get_bool("model.freeze_backbone", true);
    m.variant = variant;
    m.validate();
    return m;
}

train::TrainConfig make_train_config(const Config& cfg) {
    train::TrainConfig t;
    t.lr = cfg.get_double("train.lr", t.lr);
    t.batch_size = cfg.get_int("train.batch_size", t.batch_size);
    t.max_epochs = cfg.get_int("train.max_epochs", t.max_epochs);
    t.huber_delta = cfg.get_double("train.huber_delta", t.huber_delta);
    for (auto& [task, w] : t.loss_weights) {
        w = cfg.get_double("train.weight_" + targets::task_name(task), w);
    }
    t.plateau_patience = cfg.get_int("train.plateau_patience", t.plateau_patience);
    t.plateau_factor = cfg.get_double("train.plateau_factor", t.plateau_factor);
    t.min_delta = cfg.get_double("train.min_delta", t.min_delta);
    t.early_stop_patience = cfg.get_int("train.early_stop_patience", t.early_stop_patience);
    t.seed = cfg.get_u64("train.seed", t.seed);
    t.val_fraction = cfg.get_double("train.val_fraction", t.val_fraction);
    t.weight_decay = cfg.get_double("train.weight_decay", t.weight_decay);
    t.threads = cfg.get_int("train.threads", t.threads);
    t.noise_max = cfg.get_double("train.noise_max", t.noise_max);
    t.validate();
    return t;
}

int cmd_gen(const Config& cfg) {
    gen::GenConfig g = make_gen_config(cfg);
    std::string manifest = gen::generate_dataset(g);
    std::cout << "gen: wrote " << g.n_images << " images and " << manifest << "\n";
    return 0;
}

int cmd_train(const Config& cfg) {
    auto variant = variant_from(cfg, cfg.has("train.variant") ? "train.variant" : "gen.variant");
    std::string data_dir = cfg.get_str("train.dataset", dataset_dir(cfg));
    train::TrainConfig tcfg = make_train_config(cfg);
    train::Dataset data = train::load_dataset(data_dir, variant, tcfg.noise_max);
    vit::ModelConfig mcfg = make_model_config(cfg, variant, data.scales.image_size);
    std::string resume = cfg.get_str("train.resume", "");
    auto result = train::fit(data, mcfg, tcfg, train_dir(cfg), resume,
                             !cfg.get_bool("train.quiet", false));
    std::cout << "train: " << result.series.size() << " epochs logged, best val "
              << csv::fmt(result.best_val, 6) << " at epoch " << result.best_epoch
              << (result.early_stopped ? " (early stop)" : "") << "\n"
              << "train: checkpoints " << result.best_checkpoint << ", "
              << result.last_checkpoint << "\n";
    return 0;
}

namespace {

struct EvalOutput {
    csv::Table predictions;
    std::map<Task, double> rho;
};

// Predictions denormalized to physical units, plus per-task Pearson
// correlations computed from exactly the values written to the CSV.
EvalOutput run_eval(const vit::Checkpoint& ck, const std::string& data_dir,
                    const std::string& split_name, int batch_size, int threads) {
    auto meta = [&ck](const std::string& k) {
        auto it = ck.metadata.find(k);
        if (it == ck.metadata.end()) {
            throw std::runtime_error("eval: checkpoint missing metadata " + k);
        }
        return it->second;
    };
    const auto variant = ck.params.cfg.variant;
    const double noise_max = std::stod(meta("train.noise_max"));
    train::Dataset data = train::load_dataset(data_dir, variant, noise_max);
    if (data.images[0].width != ck.params.cfg.image_size) {
        throw std::runtime_error("eval: dataset image size does not match checkpoint");
    }

    auto split = train::split_dataset(data.n(), std::stod(meta("train.val_fraction")),
                                      std::stoull(meta("train.seed")));
    std::vector<int> ids;
    if (split_name == "val") {
        ids = split.val;
    } else if (split_name == "train") {
        ids = split.train;
    } else if (split_name == "all") {
        ids.resize(static_cast<std::size_t>(data.n()));
        for (int i = 0; i < data.n(); ++i) ids[static_cast<std::size_t>(i)] = i;
    } else {
        throw ConfigError("eval.split must be val, train or all");
    }
    std::sort(ids.begin(), ids.end());

    const auto& tasks = targets::tasks_for(variant);
    EvalOutput out;
    csv::Table& t = out.predictions;
    t.header = {"image_id", "pred_angle_deg", "pred_x1", "pred_y1", "pred_x2", "pred_y2",
                "pred_noise_level"};
    auto feats = gen::features(variant);
    if (feats.vary_length) t.header.push_back("pred_length");
    if (feats.vary_width) t.header.push_back("pred_width");
    if (feats.vary_color) {
        t.header.insert(t.header.end(), {"pred_color_r", "pred_color_g", "pred_color_b"});
    }
    t.header.push_back("clamped");

    // Physical-unit columns per task for the correlation report.
    std::map<Task, std::vector<std::vector<double>>> pred_cols, true_cols;
    for (Task task : tasks) {
        pred_cols[task].resize(static_cast<std::size_t>(targets::task_dim(task)));
        true_cols[task].resize(static_cast<std::size_t>(targets::task_dim(task)));
    }
    auto manifest = gen::read_manifest(gen::manifest_path(data_dir));

    const int n = static_cast<int>(ids.size());
    for (int b = 0; b < n; b += batch_size) {
        int e = std::min(n, b + batch_size);
        std::vector<ImageCanvas> imgs;
        imgs.reserve(static_cast<std::size_t>(e - b));
        for (int r = b; r < e; ++r) {
            imgs.push_back(data.images[static_cast<std::size_t>(ids[static_cast<std::size_t>(r)])]);
        }
        auto outputs = vit::forward(ck.params, vit::images_to_matrix(imgs), nullptr, threads);
        for (int r = b; r < e; ++r) {
            int row = r - b;
            int idx = ids[static_cast<std::size_t>(r)];
            targets::NormalizedTargets nt;
            nt.angle = outputs.at(Task::angle)(row, 0);
            for (int j = 0; j < 4; ++j) nt.coords[static_cast<std::size_t>(j)] = outputs.at(Task::coords)(row, j);
            nt.noise = outputs.at(Task::noise)(row, 0);
            if (feats.vary_length) nt.length = outputs.at(Task::length)(row, 0);
            if (feats.vary_width) nt.width = outputs.at(Task::width)(row, 0);
            if (feats.vary_color) {
                for (int j = 0; j < 3; ++j) nt.color[static_cast<std::size_t>(j)] = outputs.at(Task::color)(row, j);
            }
            auto d = targets::denormalize(nt, variant, data.scales);

            const auto& m = manifest[static_cast<std::size_t>(idx)];
            std::vector<std::string> csv_row = {m.image_id, csv::fmt_exact(d.angle_deg),
                                                csv::fmt_exact(d.x1), csv::fmt_exact(d.y1),
                                                csv::fmt_exact(d.x2), csv::fmt_exact(d.y2),
                                                csv::fmt_exact(d.noise_level)};
            if (feats.vary_length) csv_row.push_back(csv::fmt_exact(d.length));
            if (feats.vary_width) csv_row.push_back(csv::fmt_exact(d.width));
            if (feats.vary_color) {
                for (int j = 0; j < 3; ++j) csv_row.push_back(csv::fmt_exact(d.color[static_cast<std::size_t>(j)]));
            }
            csv_row.push_back(d.clamped ? "1" : "0");
            t.rows.push_back(std::move(csv_row));

            auto push = [&](Task task, int j, double pv, double tv) {
                pred_cols[task][static_cast<std::size_t>(j)].push_back(pv);
                true_cols[task][static_cast<std::size_t>(j)].push_back(tv);
            };
            push(Task::angle, 0, d.angle_deg, m.angle_deg);
            push(Task::coords, 0, d.x1, m.x1);
            push(Task::coords, 1, d.y1, m.y1);
            push(Task::coords, 2, d.x2, m.x2);
            push(Task::coords, 3, d.y2, m.y2);
            push(Task::noise, 0, d.noise_level, m.noise_level);
            if (feats.vary_length) push(Task::length, 0, d.length, m.length);
            if (feats.vary_width) push(Task::width, 0, d.width, m.width);
            if (feats.vary_color) {
                for (int j = 0; j < 3; ++j) {
                    push(Task::color, j, d.color[static_cast<std::size_t>(j)],
                         m.color_rgb[static_cast<std::size_t>(j)]);
                }
            }
        }
    }

    for (Task task : tasks) {
        double acc = 0;
        const auto& pc = pred_cols[task];
        for (std::size_t j = 0; j < pc.size(); ++j) {
            acc += analysis::pearson(pc[j], true_cols[task][j]);
        }
        out.rho[task] = acc / static_cast<double>(pc.size());
    }
    return out;
}

} // namespace

int cmd_eval(const Config& cfg) {
    std::string ckpt = cfg.get_str("eval.checkpoint",
                                   (fs::path(train_dir(cfg)) / "ckpt_best.bin").string());
    std::string data_dir = cfg.get_str("eval.dataset", dataset_dir(cfg));
    std::string out_dir = eval_dir(cfg);
    fs::create_directories(out_dir);

    auto ck = vit::load_checkpoint(ckpt);
    auto result = run_eval(ck, data_dir, cfg.get_str("eval.split", "val"),
                           cfg.get_int("train.batch_size", 32),
                           cfg.get_int("train.threads", 1));
    std::string pred_path = (fs::path(out_dir) / "predictions.csv").string();
    csv::write_csv(pred_path, result.predictions);
    std::cout << "eval: wrote " << result.predictions.rows.size() << " predictions to "
              << pred_path << "\n";
    for (const auto& [task, rho] : result.rho) {
        std::cout << "rho_" << targets::task_name(task) << " " << csv::fmt_exact(rho)
                  << "\n";
    }
    return 0;
}

namespace {

csv::Table bins_to_table(const std::vector<analysis::BinStat>& bins) {
    csv::Table t;
    t.header = {"label", "lo", "hi", "center", "n", "mean", "median", "q1", "q3", "p75"};
    for (const auto& b : bins) {
        if (b.n == 0) {
            t.rows.push_back({b.label, csv::fmt(b.lo), csv::fmt(b.hi), csv::fmt(b.center),
                              "0", "", "", "", "", ""});
        } else {
            t.rows.push_back({b.label, csv::fmt(b.lo), csv::fmt(b.hi), csv::fmt(b.center),
                              std::to_string(b.n), csv::fmt_exact(b.mean),
                              csv::fmt_exact(b.median), csv::fmt_exact(b.q1),
                              csv::fmt_exact(b.q3), csv::fmt_exact(b.p75)});
        }
    }
    return t;
}

csv::Table groups_to_table(const std::vector<analysis::GroupStat>& groups) {
    csv::Table t;
    t.header = {"group", "n", "mean", "median", "p75"};
    for (const auto& g : groups) {
        t.rows.push_back({g.group, std::to_string(g.n), csv::fmt_exact(g.mean),
                          csv::fmt_exact(g.median), csv::fmt_exact(g.p75)});
    }
    return t;
}

} // namespace

int cmd_analyze(const Config& cfg) {
    auto variant = variant_from(cfg, cfg.has("analyze.variant") ? "analyze.variant"
                                                                : "gen.variant");
    auto feats = gen::features(variant);
    std::string pred_path =
        cfg.get_str("analyze.predictions",
                    (fs::path(eval_dir(cfg)) / "predictions.csv").string());
    std::string data_dir = cfg.get_str("analyze.dataset", dataset_dir(cfg));
    std::string metrics_path =
        cfg.get_str("analyze.metrics", (fs::path(train_dir(cfg)) / "metrics.csv").string());
    std::string out_dir = stats_dir(cfg);
    fs::create_directories(out_dir);

    auto predictions = csv::read_csv(pred_path);
    auto manifest = gen::read_manifest(gen::manifest_path(data_dir));
    auto records = analysis::build_error_records(predictions, manifest);
    if (records.empty()) throw std::runtime_error("analyze: no prediction records");

    auto save = [&out_dir](const std::string& name, const csv::Table& t) {
        csv::write_csv((fs::path(out_dir) / name).string(), t);
        std::cout << "analyze: wrote " << (fs::path(out_dir) / name).string() << "\n";
    };

    double bin_width = cfg.get_double("analyze.angle_bin_width", 10.0);
    save("angle_profile.csv", bins_to_table(analysis::angle_bin_profile(records, bin_width)));

    if (feats.vary_length) {
        double lmin = records[0].length, lmax = records[0].length;
        for (const auto& r : records) {
            lmin = std::min(lmin, r.length);
            lmax = std::max(lmax, r.length);
        }
        // Default decile bins follow the reference scheme scaled to the
        // generated length range; an explicit "lo,hi,width" key overrides.
        double image_size = cfg.get_double("analyze.image_size",
                                           cfg.get_double("gen.image_size", 224));
        double s = image_size / 224.0;
        double lo = 20.0 * s, hi = 100.0 * s, width = 8.0 * s;
        if (cfg.has("analyze.length_bins")) {
            auto v = cfg.get_doubles("analyze.length_bins", {});
            if (v.size() != 3) throw ConfigError("analyze.length_bins must be lo,hi,width");
            lo = v[0];
            hi = v[1];
            width = v[2];
        } else if (lmin < lo || lmax > hi) {
            lo = std::floor(lmin);
            hi = std::ceil(lmax);
            width = (hi - lo) / 10.0;
        }
        save("length_bins.csv", bins_to_table(analysis::length_bin_stats(records, lo, hi, width)));

        std::vector<std::pair<double, double>> pts;
        pts.reserve(records.size());
        double emax = 0;
        for (const auto& r : records) {
            pts.emplace_back(r.length, r.angle_error_deg);
            emax = std::max(emax, r.angle_error_deg);
        }
        analysis::Extent extent{lo, hi, 0.0, std::max(1.0, emax)};
        auto hexes = analysis::hexbin(pts, extent, cfg.get_int("analyze.hexbin_gridsize", 12));
        csv::Table ht;
        ht.header = {"ix", "iy", "cx", "cy", "count"};
        for (const auto& h : hexes) {
            ht.rows.push_back({std::to_string(h.ix), std::to_string(h.iy), csv::fmt(h.cx, 4),
                               csv::fmt(h.cy, 4), std::to_string(h.count)});
        }
        save("hexbin.csv", ht);
    }

    if (feats.vary_width) {
        save("width_groups.csv",
             groups_to_table(analysis::group_stats(records, analysis::GroupBy::width)));
    }
    save("noise_groups.csv",
         groups_to_table(analysis::group_stats(records, analysis::GroupBy::noise_level)));

    if (feats.vary_color) {
        auto colors = analysis::group_stats(records, analysis::GroupBy::color);
        save("color_groups.csv", groups_to_table(colors));

        int k = cfg.get_int("analyze.k_clusters", 4);
        std::vector<std::pair<std::string, double>> labeled;
        labeled.reserve(colors.size());
        for (const auto& c : colors) labeled.emplace_back(c.group, c.p75);
        auto clusters = analysis::kmeans_1d(labeled, k);
        csv::Table ct;
        ct.header = {"color_name", "p75", "cluster"};
        for (std::size_t i = 0; i < labeled.size(); ++i) {
            ct.rows.push_back({labeled[i].first, csv::fmt_exact(labeled[i].second),
                               std::to_string(clusters.cluster_of[i])});
        }
        save("color_clusters.csv", ct);
    }

    if (fs::exists(metrics_path)) {
        auto series = read_metrics_csv(metrics_path);
        int smooth_window = cfg.get_int("analyze.smooth_window", 5);
        csv::Table pe;
        pe.header = {"epoch", "prominence"};
        csv::Table rj;
        rj.header = {"event_epoch", "task", "jump_epoch", "jump"};
        // Runs shorter than the smoothing window carry no detectable bumps;
        // emit empty tables rather than failing the stage.
        if (static_cast<int>(series.size()) > smooth_window) {
            auto dyn = analysis::correlation_dynamics(
                series, smooth_window, cfg.get_double("analyze.min_prominence", -1.0),
                cfg.get_int("analyze.align_window", 5));
            for (const auto& ev : dyn.loss_events) {
                pe.rows.push_back({std::to_string(ev.epoch), csv::fmt_exact(ev.prominence)});
            }
            for (const auto& j : dyn.aligned_jumps) {
                rj.rows.push_back({std::to_string(j.event_epoch), targets::task_name(j.task),
                                   std::to_string(j.jump_epoch), csv::fmt_exact(j.jump)});
            }
        }
        save("phase_events.csv", pe);
        save("rho_jumps.csv", rj);
    }
    return 0;
}

int cmd_report(const Config& cfg) {
    std::string in_dir = cfg.get_str("report.stats", stats_dir(cfg));
    std::string metrics_path =
        cfg.get_str("report.metrics", (fs::path(train_dir(cfg)) / "metrics.csv").string());
    std::string out_dir = figures_dir(cfg);
    std::string tag = gen::variant_name(
        variant_from(cfg, cfg.has("analyze.variant") ? "analyze.variant" : "gen.variant"));
    fs::create_directories(out_dir);

    int made = 0;
    auto emit = [&](const std::string& stat_file, report::FigureKind kind,
                    const std::string& title, const std::string& name,
                    const csv::Table* overlay = nullptr) {
        fs::path src = fs::path(in_dir) / stat_file;
        if (!fs::exists(src)) return;
        report::FigureSpec spec;
        spec.kind = kind;
        spec.title = title + " (Dataset " + tag + ")";
        std::string out = (fs::path(out_dir) / (name + "_" + tag + ".svg")).string();
        report::render_to_file(out, spec, csv::read_csv(src.string()), overlay);
        std::cout << "report: wrote " << out << "\n";
        ++made;
    };

    emit("angle_profile.csv", report::FigureKind::polar_profile,
         "Angle error by orientation", "polar_profile");
    emit("length_bins.csv", report::FigureKind::binned_box, "Angle error by line length",
         "binned_box_length");
    emit("hexbin.csv", report::FigureKind::hexbin, "Angle error vs length density",
         "hexbin");
    emit("width_groups.csv", report::FigureKind::group_bars, "Angle error by line width",
         "group_bars_width");
    emit("color_groups.csv", report::FigureKind::group_bars, "Angle error by color",
         "group_bars_color");
    emit("noise_groups.csv", report::FigureKind::group_bars, "Angle error by noise level",
         "group_bars_noise");
    emit("color_clusters.csv", report::FigureKind::cluster_pie,
         "Color clusters by p75 angle error", "cluster_pie");

    if (fs::exists(metrics_path)) {
        csv::Table metrics = csv::read_csv(metrics_path);
        fs::path events_path = fs::path(in_dir) / "phase_events.csv";
        if (fs::exists(events_path)) {
            csv::Table events = csv::read_csv(events_path.string());
            report::FigureSpec spec;
            spec.kind = report::FigureKind::loss_curves;
            spec.title = "Training dynamics (Dataset " + tag + ")";
            std::string out = (fs::path(out_dir) / ("loss_curves_" + tag + ".svg")).string();
            report::render_to_file(out, spec, metrics, &events);
            std::cout << "report: wrote " << out << "\n";
            ++made;
        }
    }
    if (made == 0) throw std::runtime_error("report: no stats files found in " + in_dir);
    return 0;
}

namespace {

std::string iso_utc_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// metrics.csv carries wall-clock timings; mask that column so the hash
// reflects only the deterministic content.
std::string masked_metrics_hash(const std::string& path) {
    csv::Table t = csv::read_csv(path);
    if (t.has_col("inference_ms")) {
        std::size_t c = t.col("inference_ms");
        for (auto& row : t.rows) row[c].clear();
    }
    return hash_string(csv::to_string(t));
}

json hash_entry(const std::string& root, const std::string& rel,
                const std::string& hash, const char* excludes = nullptr) {
    json e;
    e["path"] = rel;
    e["hash"] = "fnv1a64:" + hash;
    if (excludes) e["hash_excludes"] = excludes;
    (void)root;
    return e;
}

json dir_images_entry(const std::string& dir) {
    // Aggregate hash over the per-file hashes of Image*.png in index order.
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::string n = e.path().filename().string();
        if (n.rfind("Image", 0) == 0 && e.path().extension() == ".png") names.push_back(n);
    }
    std::sort(names.begin(), names.end(), [](const std::string& a, const std::string& b) {
        return std::stoi(a.substr(5, a.size() - 9)) < std::stoi(b.substr(5, b.size() - 9));
    });
    std::string combined;
    for (const auto& n : names) combined += hash_file((fs::path(dir) / n).string());
    json e;
    e["path"] = "images";
    e["count"] = names.size();
    e["hash"] = "fnv1a64:" + hash_string(combined);
    return e;
}

} // namespace

int cmd_all(const Config& base) {
    std::string root = base.get_str("run.out", "out/run");
    fs::create_directories(root);

    Config cfg = base;
    cfg.set("gen.out", (fs::path(root) / "dataset").string());
    cfg.set("train.out", (fs::path(root) / "train").string());
    cfg.set("eval.out", (fs::path(root) / "eval").string());
    cfg.set("analyze.out", (fs::path(root) / "stats").string());
    cfg.set("report.out", (fs::path(root) / "figures").string());

    json manifest;
    manifest["tool"] = kToolName;
    manifest["version"] = kVersion;
    manifest["created_utc"] = iso_utc_now();
    manifest["config"] = json::object();
    for (const auto& [k, v] : cfg.values()) manifest["config"][k] = v;
    manifest["stages"] = json::array();

    auto stage = [&manifest](const std::string& name, const std::vector<json>& outputs) {
        json s;
        s["name"] = name;
        s["outputs"] = outputs;
        manifest["stages"].push_back(s);
    };

    cmd_gen(cfg);
    stage("gen", {hash_entry(root, "dataset/manifest.csv",
                             hash_file(gen::manifest_path(dataset_dir(cfg)))),
                  dir_images_entry(dataset_dir(cfg))});

    cmd_train(cfg);
    stage("train",
          {hash_entry(root, "train/metrics.csv",
                      masked_metrics_hash((fs::path(train_dir(cfg)) / "metrics.csv").string()),
                      "inference_ms"),
           hash_entry(root, "train/ckpt_best.bin",
                      hash_file((fs::path(train_dir(cfg)) / "ckpt_best.bin").string())),
           hash_entry(root, "train/ckpt_last.bin",
                      hash_file((fs::path(train_dir(cfg)) / "ckpt_last.bin").string()))});

    cmd_eval(cfg);
    stage("eval", {hash_entry(root, "eval/predictions.csv",
                              hash_file((fs::path(eval_dir(cfg)) / "predictions.csv").string()))});

    cmd_analyze(cfg);
    std::vector<json> stat_entries;
    {
        std::vector<std::string> names;
        for (const auto& e : fs::directory_iterator(stats_dir(cfg))) {
            if (e.path().extension() == ".csv") names.push_back(e.path().filename().string());
        }
        std::sort(names.begin(), names.end());
        for (const auto& n : names) {
            stat_entries.push_back(hash_entry(
                root, "stats/" + n, hash_file((fs::path(stats_dir(cfg)) / n).string())));
        }
    }
    stage("analyze", stat_entries);

    cmd_report(cfg);
    std::vector<json> fig_entries;
    {
        std::vector<std::string> names;
        for (const auto& e : fs::directory_iterator(figures_dir(cfg))) {
            if (e.path().extension() == ".svg") names.push_back(e.path().filename().string());
        }
        std::sort(names.begin(), names.end());
        for (const auto& n : names) {
            fig_entries.push_back(hash_entry(
                root, "figures/" + n, hash_file((fs::path(figures_dir(cfg)) / n).string())));
        }
    }
    stage("report", fig_entries);

    std::string mpath = (fs::path(root) / "run_manifest.json").string();
    std::ofstream out(mpath);
    if (!out) throw std::runtime_error("all: cannot write " + mpath);
    out << manifest.dump(2) << "\n";
    std::cout << "all: wrote " << mpath << "\n";
    return 0;
}

} // namespace linevit::cli
