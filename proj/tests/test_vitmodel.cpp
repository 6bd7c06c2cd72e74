#include "linevit/vitmodel.hpp"

#include "linevit/config.hpp"
#include "linevit/rng.hpp"
#include "testutil.hpp"

#include <doctest.h>

#include <cmath>
#include <vector>

using namespace linevit;
using namespace linevit::vit;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.mlp_ratio = 2.0;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 2.0;
    cfg.freeze_backbone = false;
    cfg.variant = targets::DatasetVariant::I;
    return cfg;
}

Eigen::MatrixXd random_images(const ModelConfig& cfg, int batch, uint64_t seed) {
    SplitMix64 rng(seed);
    Eigen::MatrixXd m(batch, cfg.image_size * cfg.image_size * 3);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.next_double();
    return m;
}

// Straight-line reimplementation of the forward pass with plain loops; an
// independent oracle for the Eigen implementation.
std::vector<double> naive_forward_all(const ModelParams& P,
                                      const std::vector<double>& image) {
    const ModelConfig& cfg = P.cfg;
    const int ps = cfg.patch_size, per = cfg.image_size / ps, N = per * per;
    const int d = cfg.d_model, T = N + 1, dff = cfg.d_ff();
    const int H = cfg.n_heads, hd = d / H;
    const double scale = cfg.lora_scale();
    const double eps = 1e-5;

    auto lin_lora = [&](const std::vector<std::vector<double>>& x, const Linear& l,
                        int out_dim, int in_dim) {
        std::vector<std::vector<double>> y(x.size(), std::vector<double>(out_dim, 0.0));
        for (std::size_t t = 0; t < x.size(); ++t) {
            for (int o = 0; o < out_dim; ++o) {
                double acc = l.bias(o);
                for (int i = 0; i < in_dim; ++i) acc += l.w(o, i) * x[t][i];
                if (l.has_lora()) {
                    for (int r = 0; r < l.lora_a.rows(); ++r) {
                        double u = 0;
                        for (int i = 0; i < in_dim; ++i) u += l.lora_a(r, i) * x[t][i];
                        acc += scale * l.lora_b(o, r) * u;
                    }
                }
                y[t][static_cast<std::size_t>(o)] = acc;
            }
        }
        return y;
    };
    auto layernorm = [&](const std::vector<std::vector<double>>& x,
                         const Eigen::VectorXd& g, const Eigen::VectorXd& b) {
        std::vector<std::vector<double>> y(x.size(), std::vector<double>(x[0].size()));
        for (std::size_t t = 0; t < x.size(); ++t) {
            double mean = 0;
            for (double v : x[t]) mean += v;
            mean /= static_cast<double>(x[t].size());
            double var = 0;
            for (double v : x[t]) var += (v - mean) * (v - mean);
            var /= static_cast<double>(x[t].size());
            double rstd = 1.0 / std::sqrt(var + eps);
            for (std::size_t j = 0; j < x[t].size(); ++j) {
                y[t][j] = (x[t][j] - mean) * rstd * g(static_cast<Eigen::Index>(j)) +
                          b(static_cast<Eigen::Index>(j));
            }
        }
        return y;
    };

    std::vector<std::vector<double>> x(static_cast<std::size_t>(T),
                                       std::vector<double>(static_cast<std::size_t>(d), 0.0));
    for (int j = 0; j < d; ++j) x[0][static_cast<std::size_t>(j)] = P.cls_token(j) + P.pos_embed(0, j);
    for (int pr = 0; pr < per; ++pr) {
        for (int pc = 0; pc < per; ++pc) {
            int p = pr * per + pc;
            std::vector<double> patch;
            for (int dy = 0; dy < ps; ++dy) {
                int y0 = pr * ps + dy;
                for (int dx = 0; dx < ps; ++dx) {
                    int x0 = pc * ps + dx;
                    for (int c = 0; c < 3; ++c) {
                        patch.push_back(image[static_cast<std::size_t>(
                            (y0 * cfg.image_size + x0) * 3 + c)]);
                    }
                }
            }
            for (int j = 0; j < d; ++j) {
                double acc = P.patch_embed.bias(j);
                for (std::size_t i = 0; i < patch.size(); ++i) {
                    acc += P.patch_embed.w(j, static_cast<Eigen::Index>(i)) * patch[i];
                }
                x[static_cast<std::size_t>(p) + 1][static_cast<std::size_t>(j)] =
                    acc + P.pos_embed(p + 1, j);
            }
        }
    }

    for (int li = 0; li < cfg.n_layers; ++li) {
        const BlockParams& blk = P.blocks[static_cast<std::size_t>(li)];
        auto a1 = layernorm(x, blk.ln1_g, blk.ln1_b);
        auto q = lin_lora(a1, blk.q, d, d);
        auto k = lin_lora(a1, blk.k, d, d);
        auto v = lin_lora(a1, blk.v, d, d);
        std::vector<std::vector<double>> cat(static_cast<std::size_t>(T),
                                             std::vector<double>(static_cast<std::size_t>(d), 0.0));
        for (int h = 0; h < H; ++h) {
            for (int t = 0; t < T; ++t) {
                std::vector<double> scores(static_cast<std::size_t>(T));
                double mx = -1e300;
                for (int u = 0; u < T; ++u) {
                    double s = 0;
                    for (int j = 0; j < hd; ++j) {
                        s += q[static_cast<std::size_t>(t)][static_cast<std::size_t>(h * hd + j)] *
                             k[static_cast<std::size_t>(u)][static_cast<std::size_t>(h * hd + j)];
                    }
                    scores[static_cast<std::size_t>(u)] = s / std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, scores[static_cast<std::size_t>(u)]);
                }
                double z = 0;
                for (int u = 0; u < T; ++u) {
                    scores[static_cast<std::size_t>(u)] = std::exp(scores[static_cast<std::size_t>(u)] - mx);
                    z += scores[static_cast<std::size_t>(u)];
                }
                for (int j = 0; j < hd; ++j) {
                    double acc = 0;
                    for (int u = 0; u < T; ++u) {
                        acc += scores[static_cast<std::size_t>(u)] / z *
                               v[static_cast<std::size_t>(u)][static_cast<std::size_t>(h * hd + j)];
                    }
                    cat[static_cast<std::size_t>(t)][static_cast<std::size_t>(h * hd + j)] = acc;
                }
            }
        }
        auto o = lin_lora(cat, blk.o, d, d);
        for (int t = 0; t < T; ++t) {
            for (int j = 0; j < d; ++j) {
                x[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] +=
                    o[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
            }
        }
        auto a2 = layernorm(x, blk.ln2_g, blk.ln2_b);
        auto h1 = lin_lora(a2, blk.fc1, dff, d);
        for (auto& row : h1) {
            for (auto& vv : row) vv = 0.5 * vv * (1.0 + std::erf(vv / std::sqrt(2.0)));
        }
        auto m = lin_lora(h1, blk.fc2, d, dff);
        for (int t = 0; t < T; ++t) {
            for (int j = 0; j < d; ++j) {
                x[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] +=
                    m[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
            }
        }
    }
    auto f = layernorm(x, P.final_ln_g, P.final_ln_b);

    std::vector<double> out;
    for (const auto& head : P.heads) {
        for (Eigen::Index o = 0; o < head.lin.w.rows(); ++o) {
            double acc = head.lin.bias(o);
            for (int j = 0; j < d; ++j) {
                acc += head.lin.w(o, j) * f[0][static_cast<std::size_t>(j)];
            }
            out.push_back(head.task == targets::Task::angle
                              ? std::tanh(acc)
                              : 1.0 / (1.0 + std::exp(-acc)));
        }
    }
    return out;
}

} // namespace

TEST_CASE("init is deterministic and LoRA starts at the backbone") {
    ModelConfig cfg = tiny_cfg();
    ModelParams a = init_params(cfg, 11);
    ModelParams b = init_params(cfg, 11);
    auto ra = tensor_refs(a), rb = tensor_refs(b);
    for (std::size_t i = 0; i < ra.size(); ++i) {
        for (std::ptrdiff_t j = 0; j < ra[i].size; ++j) {
            CHECK(ra[i].data[j] == rb[i].data[j]);
        }
    }
    // forward(init) equals forward with the adapters removed entirely
    ModelParams stripped = a;
    for (auto& blk : stripped.blocks) {
        for (Linear* l : {&blk.q, &blk.k, &blk.v, &blk.o}) {
            l->lora_a.setZero();
        }
    }
    auto imgs = random_images(cfg, 2, 5);
    auto ya = forward(a, imgs);
    auto yb = forward(stripped, imgs);
    for (const auto& [task, m] : ya) {
        CHECK((m - yb.at(task)).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("trainable count matches the closed form") {
    ModelConfig cfg = tiny_cfg();
    cfg.freeze_backbone = true;
    ModelParams p = init_params(cfg, 0);
    // per adapted projection: A is r*d plus B is d*r
    int64_t lora = static_cast<int64_t>(cfg.n_layers) * 4 * 2 * cfg.lora_rank * cfg.d_model;
    int64_t heads = 0;
    for (const auto& spec : heads_for(cfg.variant)) {
        heads += static_cast<int64_t>(spec.out_dim) * cfg.d_model + spec.out_dim;
    }
    CHECK(count_trainable(p) == lora + heads);
    cfg.freeze_backbone = false;
    ModelParams q = init_params(cfg, 0);
    CHECK(count_trainable(q) == count_params(q));
}

TEST_CASE("forward output ranges and determinism") {
    ModelConfig cfg = tiny_cfg();
    ModelParams p = init_params(cfg, 3);
    Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(1, cfg.image_size * cfg.image_size * 3);
    auto y0 = forward(p, zero);
    for (const auto& [task, m] : y0) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            CHECK(std::isfinite(m.data()[i]));
            if (task == targets::Task::angle) {
                CHECK(m.data()[i] >= -1.0);
                CHECK(m.data()[i] <= 1.0);
            } else {
                CHECK(m.data()[i] >= 0.0);
                CHECK(m.data()[i] <= 1.0);
            }
        }
    }
    Eigen::MatrixXd pair(2, zero.cols());
    auto one = random_images(cfg, 1, 9);
    pair.row(0) = one.row(0);
    pair.row(1) = one.row(0);
    auto y = forward(p, pair);
    for (const auto& [task, m] : y) {
        CHECK((m.row(0) - m.row(1)).cwiseAbs().maxCoeff() == 0.0);
    }
    auto y2 = forward(p, pair);
    for (const auto& [task, m] : y) {
        CHECK((m - y2.at(task)).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("forward matches a naive straight-line reimplementation") {
    ModelConfig cfg = tiny_cfg();
    ModelParams p = init_params(cfg, 21);
    // give the adapters nonzero B so the LoRA path is exercised
    SplitMix64 rng(33);
    for (auto& blk : p.blocks) {
        for (Linear* l : {&blk.q, &blk.k, &blk.v, &blk.o}) {
            for (Eigen::Index i = 0; i < l->lora_b.size(); ++i) {
                l->lora_b.data()[i] = rng.gaussian(0.0, 0.05);
            }
        }
    }
    auto imgs = random_images(cfg, 3, 77);
    auto y = forward(p, imgs);
    for (int b = 0; b < 3; ++b) {
        std::vector<double> image(static_cast<std::size_t>(imgs.cols()));
        for (Eigen::Index j = 0; j < imgs.cols(); ++j) {
            image[static_cast<std::size_t>(j)] = imgs(b, j);
        }
        auto expect = naive_forward_all(p, image);
        std::size_t k = 0;
        for (const auto& head : p.heads) {
            const Eigen::MatrixXd& m = y.at(head.task);
            for (Eigen::Index o = 0; o < m.cols(); ++o) {
                CHECK(m(b, o) == doctest::Approx(expect[k]).epsilon(1e-6));
                ++k;
            }
        }
    }
}

TEST_CASE("forward rejects mismatched image dims") {
    ModelConfig cfg = tiny_cfg();
    ModelParams p = init_params(cfg, 1);
    Eigen::MatrixXd bad(1, 10);
    CHECK_THROWS(forward(p, bad));
}

TEST_CASE("merge_lora reproduces the adapted forward") {
    ModelConfig cfg = tiny_cfg();
    ModelParams p = init_params(cfg, 5);
    SplitMix64 rng(6);
    for (auto& blk : p.blocks) {
        for (Linear* l : {&blk.q, &blk.k, &blk.v, &blk.o}) {
            for (Eigen::Index i = 0; i < l->lora_b.size(); ++i) {
                l->lora_b.data()[i] = rng.gaussian(0.0, 0.1);
            }
        }
    }
    ModelParams merged = merge_lora(p);
    for (const auto& blk : merged.blocks) {
        CHECK(blk.q.lora_b.cwiseAbs().maxCoeff() == 0.0);
    }
    auto imgs = random_images(cfg, 4, 8);
    auto ya = forward(p, imgs);
    auto yb = forward(merged, imgs);
    for (const auto& [task, m] : ya) {
        CHECK((m - yb.at(task)).cwiseAbs().maxCoeff() < 1e-5);
    }
}

TEST_CASE("merge_lora with zero B is the identity") {
    ModelConfig cfg = tiny_cfg();
    ModelParams p = init_params(cfg, 4); // B = 0 at init
    ModelParams merged = merge_lora(p);
    auto ra = tensor_refs(p), rb = tensor_refs(merged);
    for (std::size_t i = 0; i < ra.size(); ++i) {
        for (std::ptrdiff_t j = 0; j < ra[i].size; ++j) {
            CHECK(ra[i].data[j] == rb[i].data[j]);
        }
    }
}

TEST_CASE("full-rank LoRA represents an arbitrary delta") {
    ModelConfig cfg = tiny_cfg();
    cfg.lora_rank = cfg.d_model;
    cfg.lora_alpha = cfg.d_model; // scale 1
    ModelParams p = init_params(cfg, 2);
    SplitMix64 rng(12);
    Eigen::MatrixXd delta(cfg.d_model, cfg.d_model);
    for (Eigen::Index i = 0; i < delta.size(); ++i) delta.data()[i] = rng.gaussian(0, 0.05);

    Linear& q = p.blocks[0].q;
    Eigen::MatrixXd w_target = q.w + delta;
    q.lora_a = Eigen::MatrixXd::Identity(cfg.d_model, cfg.d_model);
    q.lora_b = delta; // scale 1, so B * I = delta
    ModelParams merged = merge_lora(p);
    CHECK((merged.blocks[0].q.w - w_target).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attention maps are row stochastic and idempotent under duplication") {
    ModelConfig cfg = tiny_cfg();
    ModelParams p = init_params(cfg, 14);
    auto one = random_images(cfg, 1, 3);
    AttentionMaps m1 = extract_attention_maps(p, one);
    CHECK(m1.n_patches == cfg.n_patches());
    for (const auto& m : m1.maps) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            CHECK(m.row(r).sum() == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
    Eigen::MatrixXd two(2, one.cols());
    two.row(0) = one.row(0);
    two.row(1) = one.row(0);
    AttentionMaps m2 = extract_attention_maps(p, two);
    for (std::size_t i = 0; i < m1.maps.size(); ++i) {
        CHECK((m1.maps[i] - m2.maps[i]).cwiseAbs().maxCoeff() < 1e-12);
    }
    CHECK_THROWS(extract_attention_maps(p, Eigen::MatrixXd(0, one.cols())));
}

TEST_CASE("single-patch degenerate config yields a 1x1 unit map") {
    ModelConfig cfg = tiny_cfg();
    cfg.image_size = 4;
    cfg.patch_size = 4; // one patch plus the class token
    ModelParams p = init_params(cfg, 9);
    auto imgs = random_images(cfg, 2, 4);
    AttentionMaps maps = extract_attention_maps(p, imgs);
    CHECK(maps.n_patches == 1);
    for (const auto& m : maps.maps) {
        CHECK(m.rows() == 1);
        CHECK(m.cols() == 1);
        CHECK(m(0, 0) == doctest::Approx(1.0));
    }
}

TEST_CASE("checkpoint round trip preserves every bit") {
    ModelConfig cfg = tiny_cfg();
    ModelParams p = init_params(cfg, 31);
    testutil::TempDir tmp("ckpt");
    std::map<std::string, std::string> meta{{"note", "x"}};
    std::map<std::string, Eigen::MatrixXd> extra{
        {"stuff", Eigen::MatrixXd::Random(3, 2)}};
    save_checkpoint(tmp.file("m.bin"), p, meta, extra);
    Checkpoint ck = load_checkpoint(tmp.file("m.bin"));
    CHECK(ck.metadata.at("note") == "x");
    CHECK(ck.extra.at("stuff").rows() == 3);
    CHECK((ck.extra.at("stuff") - extra.at("stuff")).cwiseAbs().maxCoeff() == 0.0);
    auto ra = tensor_refs(p), rb = tensor_refs(ck.params);
    for (std::size_t i = 0; i < ra.size(); ++i) {
        CHECK(ra[i].name == rb[i].name);
        for (std::ptrdiff_t j = 0; j < ra[i].size; ++j) {
            CHECK(ra[i].data[j] == rb[i].data[j]);
        }
    }
    CHECK(config_to_metadata(ck.params.cfg) == config_to_metadata(cfg));
}

TEST_CASE("invalid model configs are rejected") {
    ModelConfig cfg = tiny_cfg();
    cfg.patch_size = 3; // does not divide 8
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_cfg();
    cfg.n_heads = 3; // does not divide 16
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
