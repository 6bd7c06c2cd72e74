#include "linevit/vitmodel.hpp"

#include "linevit/config.hpp"
#include "linevit/csv.hpp"
#include "linevit/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <thread>

namespace linevit::vit {

namespace {
constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_grad(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

void parallel_chunks(int n, int n_threads,
                     const std::function<void(int, int, int)>& fn) {
    if (n_threads <= 1 || n <= 1) {
        fn(0, n, 0);
        return;
    }
    int chunks = std::min(n_threads, n);
    std::vector<std::thread> pool;
    pool.reserve(chunks);
    int base = n / chunks, rem = n % chunks;
    int begin = 0;
    for (int c = 0; c < chunks; ++c) {
        int len = base + (c < rem ? 1 : 0);
        pool.emplace_back(fn, begin, begin + len, c);
        begin += len;
    }
    for (auto& t : pool) t.join();
}

} // namespace

std::vector<TaskHeadSpec> heads_for(DatasetVariant v) {
    std::vector<TaskHeadSpec> out;
    for (Task t : targets::tasks_for(v)) out.push_back({t, targets::task_dim(t)});
    return out;
}

void ModelConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
        throw ConfigError("model: patch_size must divide image_size");
    }
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
        throw ConfigError("model: d_model must be divisible by n_heads");
    }
    if (n_layers < 1) throw ConfigError("model: n_layers must be >= 1");
    if (mlp_ratio <= 0 || d_ff() < 1) throw ConfigError("model: invalid mlp_ratio");
    if (lora_rank < 1 || lora_rank > d_model) {
        throw ConfigError("model: lora_rank must be in [1, d_model]");
    }
    if (channels != 3) throw ConfigError("model: only 3-channel input supported");
}

namespace {

Linear make_linear(int out, int in, bool lora, int rank) {
    Linear l;
    l.w = Eigen::MatrixXd::Zero(out, in);
    l.bias = Eigen::VectorXd::Zero(out);
    if (lora) {
        l.lora_a = Eigen::MatrixXd::Zero(rank, in);
        l.lora_b = Eigen::MatrixXd::Zero(out, rank);
    }
    return l;
}

ModelParams make_empty(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    p.patch_embed = make_linear(cfg.d_model, cfg.patch_dim(), false, 0);
    p.cls_token = Eigen::VectorXd::Zero(cfg.d_model);
    p.pos_embed = Eigen::MatrixXd::Zero(cfg.n_tokens(), cfg.d_model);
    p.blocks.resize(cfg.n_layers);
    for (auto& blk : p.blocks) {
        blk.ln1_g = Eigen::VectorXd::Zero(cfg.d_model);
        blk.ln1_b = Eigen::VectorXd::Zero(cfg.d_model);
        blk.q = make_linear(cfg.d_model, cfg.d_model, cfg.lora_q, cfg.lora_rank);
        blk.k = make_linear(cfg.d_model, cfg.d_model, cfg.lora_k, cfg.lora_rank);
        blk.v = make_linear(cfg.d_model, cfg.d_model, cfg.lora_v, cfg.lora_rank);
        blk.o = make_linear(cfg.d_model, cfg.d_model, cfg.lora_o, cfg.lora_rank);
        blk.ln2_g = Eigen::VectorXd::Zero(cfg.d_model);
        blk.ln2_b = Eigen::VectorXd::Zero(cfg.d_model);
        blk.fc1 = make_linear(cfg.d_ff(), cfg.d_model, false, 0);
        blk.fc2 = make_linear(cfg.d_model, cfg.d_ff(), false, 0);
    }
    p.final_ln_g = Eigen::VectorXd::Zero(cfg.d_model);
    p.final_ln_b = Eigen::VectorXd::Zero(cfg.d_model);
    for (const auto& spec : heads_for(cfg.variant)) {
        p.heads.push_back({spec.task, make_linear(spec.out_dim, cfg.d_model, false, 0)});
    }
    return p;
}

template <class Params, class F>
void visit_tensors(Params& p, F&& f) {
    auto lin = [&f](const std::string& prefix, auto& l, ParamRole role) {
        f(prefix + ".w", l.w, role);
        f(prefix + ".b", l.bias, role);
        if (l.lora_a.size() > 0) {
            f(prefix + ".lora_a", l.lora_a, ParamRole::lora);
            f(prefix + ".lora_b", l.lora_b, ParamRole::lora);
        }
    };
    lin("patch_embed", p.patch_embed, ParamRole::backbone);
    f("cls_token", p.cls_token, ParamRole::backbone);
    f("pos_embed", p.pos_embed, ParamRole::backbone);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        auto& blk = p.blocks[i];
        std::string pre = "block" + std::to_string(i);
        f(pre + ".ln1.g", blk.ln1_g, ParamRole::backbone);
        f(pre + ".ln1.b", blk.ln1_b, ParamRole::backbone);
        lin(pre + ".attn.q", blk.q, ParamRole::backbone);
        lin(pre + ".attn.k", blk.k, ParamRole::backbone);
        lin(pre + ".attn.v", blk.v, ParamRole::backbone);
        lin(pre + ".attn.o", blk.o, ParamRole::backbone);
        f(pre + ".ln2.g", blk.ln2_g, ParamRole::backbone);
        f(pre + ".ln2.b", blk.ln2_b, ParamRole::backbone);
        lin(pre + ".mlp.fc1", blk.fc1, ParamRole::backbone);
        lin(pre + ".mlp.fc2", blk.fc2, ParamRole::backbone);
    }
    f("final_ln.g", p.final_ln_g, ParamRole::backbone);
    f("final_ln.b", p.final_ln_b, ParamRole::backbone);
    for (auto& h : p.heads) {
        lin("head." + targets::task_name(h.task), h.lin, ParamRole::head);
    }
}

} // namespace

std::vector<TensorRef> tensor_refs(ModelParams& p) {
    std::vector<TensorRef> refs;
    visit_tensors(p, [&refs](const std::string& name, auto& t, ParamRole role) {
        refs.push_back({name, t.data(), t.size(), role});
    });
    return refs;
}

ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
    ModelParams p = make_empty(cfg);
    SplitMix64 rng(seed);
    visit_tensors(p, [&rng](const std::string& name, auto& t, ParamRole role) {
        double* d = t.data();
        auto n = t.size();
        bool is_bias = name.ends_with(".b") && name.find(".ln") == std::string::npos &&
                       name != "final_ln.b";
        if (name.ends_with(".ln1.g") || name.ends_with(".ln2.g") || name == "final_ln.g") {
            for (Eigen::Index i = 0; i < n; ++i) d[i] = 1.0;
        } else if (name.ends_with(".ln1.b") || name.ends_with(".ln2.b") ||
                   name == "final_ln.b" || is_bias) {
            // zeros already
        } else if (role == ParamRole::lora) {
            if (name.ends_with(".lora_a")) {
                for (Eigen::Index i = 0; i < n; ++i) d[i] = rng.gaussian(0.0, 0.02);
            }
            // lora_b stays zero so the adapted forward starts at the backbone
        } else if (name == "cls_token" || name == "pos_embed" || name.ends_with(".w")) {
            for (Eigen::Index i = 0; i < n; ++i) d[i] = rng.truncated_normal(0.02);
        }
    });
    return p;
}

ModelParams zeros_like(const ModelParams& p) { return make_empty(p.cfg); }

int64_t count_params(const ModelParams& p) {
    int64_t n = 0;
    visit_tensors(const_cast<ModelParams&>(p),
                  [&n](const std::string&, auto& t, ParamRole) { n += t.size(); });
    return n;
}

int64_t count_trainable(const ModelParams& p) {
    int64_t n = 0;
    bool freeze = p.cfg.freeze_backbone;
    visit_tensors(const_cast<ModelParams&>(p),
                  [&n, freeze](const std::string&, auto& t, ParamRole role) {
                      if (is_trainable(role, freeze)) n += t.size();
                  });
    return n;
}

namespace {

// y = x * W^T + bias (+ LoRA path); u receives x * A^T when present.
Eigen::MatrixXd linear_fwd(const Eigen::MatrixXd& x, const Linear& l, double scale,
                           Eigen::MatrixXd* u) {
    Eigen::MatrixXd y = x * l.w.transpose();
    y.rowwise() += l.bias.transpose();
    if (l.has_lora()) {
        *u = x * l.lora_a.transpose();
        y.noalias() += scale * (*u) * l.lora_b.transpose();
    } else if (u) {
        u->resize(0, 0);
    }
    return y;
}

// Accumulates parameter grads; returns gradient w.r.t. x.
Eigen::MatrixXd linear_bwd(const Eigen::MatrixXd& x, const Linear& l, double scale,
                           const Eigen::MatrixXd& u, const Eigen::MatrixXd& dy,
                           Linear& grad, bool want_dense) {
    Eigen::MatrixXd dx = dy * l.w;
    if (want_dense) {
        grad.w.noalias() += dy.transpose() * x;
        grad.bias += dy.colwise().sum().transpose();
    }
    if (l.has_lora()) {
        Eigen::MatrixXd du = scale * dy * l.lora_b; // T x r
        grad.lora_b.noalias() += scale * dy.transpose() * u;
        grad.lora_a.noalias() += du.transpose() * x;
        dx.noalias() += du * l.lora_a;
    }
    return dx;
}

// Row-wise layernorm; fills xhat and rstd caches.
Eigen::MatrixXd layernorm_fwd(const Eigen::MatrixXd& x, const Eigen::VectorXd& g,
                              const Eigen::VectorXd& b, Eigen::MatrixXd& xhat,
                              Eigen::VectorXd& rstd) {
    const auto rows = x.rows();
    const auto cols = x.cols();
    xhat.resize(rows, cols);
    rstd.resize(rows);
    Eigen::MatrixXd y(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        double mean = x.row(i).mean();
        double var = (x.row(i).array() - mean).square().mean();
        double r = 1.0 / std::sqrt(var + kLnEps);
        rstd(i) = r;
        xhat.row(i) = (x.row(i).array() - mean) * r;
        y.row(i) = xhat.row(i).array() * g.transpose().array() + b.transpose().array();
    }
    return y;
}

Eigen::MatrixXd layernorm_bwd(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& xhat,
                              const Eigen::VectorXd& rstd, const Eigen::VectorXd& g,
                              Eigen::VectorXd& dg, Eigen::VectorXd& db,
                              bool want_dense) {
    const auto rows = dy.rows();
    const auto cols = dy.cols();
    if (want_dense) {
        dg += (dy.array() * xhat.array()).colwise().sum().matrix().transpose();
        db += dy.colwise().sum().transpose();
    }
    Eigen::MatrixXd dx(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        Eigen::ArrayXd dxhat = dy.row(i).transpose().array() * g.array();
        double m1 = dxhat.mean();
        double m2 = (dxhat * xhat.row(i).transpose().array()).mean();
        dx.row(i) = (rstd(i) * (dxhat - m1 - xhat.row(i).transpose().array() * m2))
                        .matrix()
                        .transpose();
    }
    return dx;
}

void softmax_rows(Eigen::MatrixXd& s) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        double mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
    }
}

Eigen::MatrixXd extract_patches(const ModelConfig& cfg,
                                const Eigen::Ref<const Eigen::RowVectorXd>& image) {
    const int ps = cfg.patch_size;
    const int per_side = cfg.patches_per_side();
    const int w = cfg.image_size;
    Eigen::MatrixXd patches(cfg.n_patches(), cfg.patch_dim());
    for (int pr = 0; pr < per_side; ++pr) {
        for (int pc = 0; pc < per_side; ++pc) {
            int p = pr * per_side + pc;
            int idx = 0;
            for (int dy = 0; dy < ps; ++dy) {
                int y = pr * ps + dy;
                int base = (y * w + pc * ps) * 3;
                for (int dx = 0; dx < ps * 3; ++dx) {
                    patches(p, idx++) = image(base + dx);
                }
            }
        }
    }
    return patches;
}

void forward_sample(const ModelParams& params,
                    const Eigen::Ref<const Eigen::RowVectorXd>& image,
                    SampleCache& cache) {
    const ModelConfig& cfg = params.cfg;
    const int T = cfg.n_tokens();
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const double lora_scale = cfg.lora_scale();

    cache.patches = extract_patches(cfg, image);
    Eigen::MatrixXd embed = cache.patches * params.patch_embed.w.transpose();
    embed.rowwise() += params.patch_embed.bias.transpose();

    cache.x0.resize(T, d);
    cache.x0.row(0) = params.cls_token.transpose();
    cache.x0.bottomRows(T - 1) = embed;
    cache.x0 += params.pos_embed;

    cache.blocks.resize(cfg.n_layers);
    Eigen::MatrixXd x = cache.x0;
    for (int li = 0; li < cfg.n_layers; ++li) {
        const BlockParams& blk = params.blocks[li];
        BlockCache& bc = cache.blocks[li];
        bc.x_in = x;
        bc.ln1_out = layernorm_fwd(x, blk.ln1_g, blk.ln1_b, bc.ln1_xhat, bc.ln1_rstd);
        bc.qm = linear_fwd(bc.ln1_out, blk.q, lora_scale, &bc.u_q);
        bc.km = linear_fwd(bc.ln1_out, blk.k, lora_scale, &bc.u_k);
        bc.vm = linear_fwd(bc.ln1_out, blk.v, lora_scale, &bc.u_v);

        bc.probs.resize(cfg.n_heads);
        bc.attn_cat.resize(T, d);
        for (int h = 0; h < cfg.n_heads; ++h) {
            auto qh = bc.qm.middleCols(h * hd, hd);
            auto kh = bc.km.middleCols(h * hd, hd);
            auto vh = bc.vm.middleCols(h * hd, hd);
            Eigen::MatrixXd s = att_scale * qh * kh.transpose();
            softmax_rows(s);
            bc.probs[h] = std::move(s);
            bc.attn_cat.middleCols(h * hd, hd).noalias() = bc.probs[h] * vh;
        }
        Eigen::MatrixXd o = linear_fwd(bc.attn_cat, blk.o, lora_scale, &bc.u_o);
        bc.x_mid = x + o;

        bc.ln2_out = layernorm_fwd(bc.x_mid, blk.ln2_g, blk.ln2_b, bc.ln2_xhat,
                                   bc.ln2_rstd);
        bc.mlp_pre = linear_fwd(bc.ln2_out, blk.fc1, lora_scale, nullptr);
        bc.mlp_act = bc.mlp_pre.unaryExpr([](double v) { return gelu(v); });
        Eigen::MatrixXd m = linear_fwd(bc.mlp_act, blk.fc2, lora_scale, nullptr);
        x = bc.x_mid + m;
    }

    Eigen::MatrixXd f =
        layernorm_fwd(x, params.final_ln_g, params.final_ln_b, cache.final_xhat,
                      cache.final_rstd);
    cache.feature = f.row(0);
}

double head_activation(Task task, double z) {
    if (task == Task::angle) return std::tanh(z);
    return 1.0 / (1.0 + std::exp(-z));
}

} // namespace

Eigen::MatrixXd images_to_matrix(const std::vector<ImageCanvas>& imgs) {
    if (imgs.empty()) return {};
    const auto px = imgs[0].pixels.size();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(imgs.size()),
                      static_cast<Eigen::Index>(px));
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        if (imgs[i].pixels.size() != px) {
            throw std::runtime_error("images_to_matrix: mismatched image sizes");
        }
        for (std::size_t j = 0; j < px; ++j) {
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                imgs[i].pixels[j] / 255.0;
        }
    }
    return m;
}

TaskOutputs forward(const ModelParams& params, const Eigen::MatrixXd& images,
                    ForwardCaches* caches, int n_threads) {
    const ModelConfig& cfg = params.cfg;
    const auto expected = static_cast<Eigen::Index>(cfg.image_size) * cfg.image_size * 3;
    if (images.cols() != expected) {
        throw std::runtime_error("forward: image row size " + std::to_string(images.cols()) +
                                 " != expected " + std::to_string(expected));
    }
    const int B = static_cast<int>(images.rows());

    ForwardCaches local;
    ForwardCaches& fc = caches ? *caches : local;
    fc.samples.resize(B);
    fc.outputs.clear();

    parallel_chunks(B, n_threads, [&](int begin, int end, int) {
        for (int b = begin; b < end; ++b) {
            forward_sample(params, images.row(b), fc.samples[b]);
        }
    });

    TaskOutputs out;
    for (const auto& head : params.heads) {
        Eigen::MatrixXd y(B, head.lin.w.rows());
        for (int b = 0; b < B; ++b) {
            Eigen::RowVectorXd z =
                fc.samples[b].feature * head.lin.w.transpose() + head.lin.bias.transpose();
            for (Eigen::Index j = 0; j < z.size(); ++j) {
                y(b, j) = head_activation(head.task, z(j));
            }
        }
        out[head.task] = std::move(y);
    }
    fc.outputs = out;
    return out;
}

namespace {

void backprop_sample(const ModelParams& params, const SampleCache& cache,
                     const Eigen::RowVectorXd& dfeature, ModelParams& grads,
                     bool backbone_grads) {
    const ModelConfig& cfg = params.cfg;
    const int T = cfg.n_tokens();
    const int hd = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const double lora_scale = cfg.lora_scale();

    // Final layernorm: only the class-token row carries gradient.
    Eigen::MatrixXd df = Eigen::MatrixXd::Zero(T, cfg.d_model);
    df.row(0) = dfeature;
    Eigen::MatrixXd dx =
        layernorm_bwd(df, cache.final_xhat, cache.final_rstd, params.final_ln_g,
                      grads.final_ln_g, grads.final_ln_b, backbone_grads);

    for (int li = cfg.n_layers - 1; li >= 0; --li) {
        const BlockParams& blk = params.blocks[li];
        const BlockCache& bc = cache.blocks[li];
        BlockParams& gblk = grads.blocks[li];

        // MLP branch (dx flows through the residual unchanged).
        Eigen::MatrixXd dact = dx * blk.fc2.w;
        if (backbone_grads) {
            gblk.fc2.w.noalias() += dx.transpose() * bc.mlp_act;
            gblk.fc2.bias += dx.colwise().sum().transpose();
        }
        Eigen::MatrixXd dpre =
            dact.array() * bc.mlp_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
        Eigen::MatrixXd dln2 = dpre * blk.fc1.w;
        if (backbone_grads) {
            gblk.fc1.w.noalias() += dpre.transpose() * bc.ln2_out;
            gblk.fc1.bias += dpre.colwise().sum().transpose();
        }
        dx += layernorm_bwd(dln2, bc.ln2_xhat, bc.ln2_rstd, blk.ln2_g, gblk.ln2_g,
                            gblk.ln2_b, backbone_grads);

        // Attention branch.
        Eigen::MatrixXd dcat = linear_bwd(bc.attn_cat, blk.o, lora_scale, bc.u_o, dx,
                                          gblk.o, backbone_grads);
        Eigen::MatrixXd dq(T, cfg.d_model), dk(T, cfg.d_model), dv(T, cfg.d_model);
        for (int h = 0; h < cfg.n_heads; ++h) {
            auto qh = bc.qm.middleCols(h * hd, hd);
            auto kh = bc.km.middleCols(h * hd, hd);
            auto vh = bc.vm.middleCols(h * hd, hd);
            auto dch = dcat.middleCols(h * hd, hd);
            const Eigen::MatrixXd& p = bc.probs[h];

            Eigen::MatrixXd dp = dch * vh.transpose();
            dv.middleCols(h * hd, hd).noalias() = p.transpose() * dch;
            // softmax rows backward
            Eigen::VectorXd rowdot = (dp.array() * p.array()).rowwise().sum();
            Eigen::MatrixXd ds = (dp.colwise() - rowdot).cwiseProduct(p);
            dq.middleCols(h * hd, hd).noalias() = att_scale * ds * kh;
            dk.middleCols(h * hd, hd).noalias() = att_scale * ds.transpose() * qh;
        }
        Eigen::MatrixXd dln1 =
            linear_bwd(bc.ln1_out, blk.q, lora_scale, bc.u_q, dq, gblk.q, backbone_grads);
        dln1 += linear_bwd(bc.ln1_out, blk.k, lora_scale, bc.u_k, dk, gblk.k,
                           backbone_grads);
        dln1 += linear_bwd(bc.ln1_out, blk.v, lora_scale, bc.u_v, dv, gblk.v,
                           backbone_grads);
        dx += layernorm_bwd(dln1, bc.ln1_xhat, bc.ln1_rstd, blk.ln1_g, gblk.ln1_g,
                            gblk.ln1_b, backbone_grads);
    }

    if (backbone_grads) {
        grads.cls_token += dx.row(0).transpose();
        grads.pos_embed += dx;
        auto de = dx.bottomRows(T - 1);
        grads.patch_embed.w.noalias() += de.transpose() * cache.patches;
        grads.patch_embed.bias += de.colwise().sum().transpose();
    }
}

} // namespace

ModelParams backprop(const ModelParams& params, const Eigen::MatrixXd& images,
                     const ForwardCaches& caches, const TaskOutputs& d_outputs,
                     int n_threads) {
    const ModelConfig& cfg = params.cfg;
    const int B = static_cast<int>(images.rows());
    if (static_cast<int>(caches.samples.size()) != B) {
        throw std::runtime_error("backprop: cache/batch size mismatch");
    }
    const bool backbone_grads = !cfg.freeze_backbone;

    // Per-sample feature gradients from every head, using the cached
    // activated outputs for the activation derivative.
    std::vector<Eigen::RowVectorXd> dfeatures(
        B, Eigen::RowVectorXd::Zero(cfg.d_model));
    ModelParams head_grads = zeros_like(params);
    for (std::size_t hi = 0; hi < params.heads.size(); ++hi) {
        const HeadParams& head = params.heads[hi];
        auto it = d_outputs.find(head.task);
        if (it == d_outputs.end()) continue;
        const Eigen::MatrixXd& dy = it->second;
        const Eigen::MatrixXd& y = caches.outputs.at(head.task);
        for (int b = 0; b < B; ++b) {
            Eigen::RowVectorXd dz(dy.cols());
            for (Eigen::Index j = 0; j < dy.cols(); ++j) {
                double yv = y(b, j);
                double act_grad =
                    head.task == Task::angle ? 1.0 - yv * yv : yv * (1.0 - yv);
                dz(j) = dy(b, j) * act_grad;
            }
            head_grads.heads[hi].lin.w.noalias() +=
                dz.transpose() * caches.samples[b].feature;
            head_grads.heads[hi].lin.bias += dz.transpose();
            dfeatures[b].noalias() += dz * head.lin.w;
        }
    }

    int chunks = std::max(1, std::min(n_threads, B));
    std::vector<ModelParams> partial;
    partial.reserve(chunks);
    for (int c = 0; c < chunks; ++c) partial.push_back(zeros_like(params));

    parallel_chunks(B, n_threads, [&](int begin, int end, int chunk) {
        for (int b = begin; b < end; ++b) {
            backprop_sample(params, caches.samples[b], dfeatures[b], partial[chunk],
                            backbone_grads);
        }
    });

    // Fixed-order reduction keeps results deterministic at a given thread count.
    ModelParams grads = std::move(partial[0]);
    auto dst = tensor_refs(grads);
    for (int c = 1; c < chunks; ++c) {
        auto src = tensor_refs(partial[c]);
        for (std::size_t i = 0; i < dst.size(); ++i) {
            for (std::ptrdiff_t j = 0; j < dst[i].size; ++j) dst[i].data[j] += src[i].data[j];
        }
    }
    auto hsrc = tensor_refs(head_grads);
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].role != ParamRole::head) continue;
        for (std::ptrdiff_t j = 0; j < dst[i].size; ++j) dst[i].data[j] += hsrc[i].data[j];
    }
    return grads;
}

ModelParams merge_lora(const ModelParams& params) {
    ModelParams merged = params;
    const double scale = params.cfg.lora_scale();
    auto merge_one = [scale](Linear& l) {
        if (l.has_lora()) {
            l.w.noalias() += scale * l.lora_b * l.lora_a;
            l.lora_b.setZero();
        }
    };
    for (auto& blk : merged.blocks) {
        merge_one(blk.q);
        merge_one(blk.k);
        merge_one(blk.v);
        merge_one(blk.o);
    }
    return merged;
}

AttentionMaps extract_attention_maps(const ModelParams& params,
                                     const Eigen::MatrixXd& probe_images) {
    if (probe_images.rows() == 0) {
        throw std::runtime_error("extract_attention_maps: empty probe batch");
    }
    ForwardCaches caches;
    forward(params, probe_images, &caches);

    const ModelConfig& cfg = params.cfg;
    const int n = cfg.n_patches();
    AttentionMaps am;
    am.n_layers = cfg.n_layers;
    am.n_heads = cfg.n_heads;
    am.n_patches = n;
    am.maps.assign(static_cast<std::size_t>(cfg.n_layers) * cfg.n_heads,
                   Eigen::MatrixXd::Zero(n, n));
    const int B = static_cast<int>(probe_images.rows());
    for (int b = 0; b < B; ++b) {
        for (int li = 0; li < cfg.n_layers; ++li) {
            for (int h = 0; h < cfg.n_heads; ++h) {
                // Drop the class token row/column, renormalize rows.
                Eigen::MatrixXd sub =
                    caches.samples[b].blocks[li].probs[h].bottomRightCorner(n, n);
                for (int r = 0; r < n; ++r) sub.row(r) /= sub.row(r).sum();
                am.maps[static_cast<std::size_t>(li) * cfg.n_heads + h] += sub;
            }
        }
    }
    for (auto& m : am.maps) m /= static_cast<double>(B);
    return am;
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'L', 'V', 'I', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}
void put_str(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
uint32_t get_u32(std::istream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
std::string get_str(std::istream& in) {
    uint32_t n = get_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    return s;
}

void put_tensor(std::ostream& out, const std::string& name, const double* data,
                uint32_t rows, uint32_t cols) {
    put_str(out, name);
    out.put(0); // dtype 0 = f64
    put_u32(out, rows);
    put_u32(out, cols);
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(sizeof(double)) * rows * cols);
}

} // namespace

std::map<std::string, std::string> config_to_metadata(const ModelConfig& cfg) {
    std::map<std::string, std::string> m;
    m["model.image_size"] = std::to_string(cfg.image_size);
    m["model.patch_size"] = std::to_string(cfg.patch_size);
    m["model.d_model"] = std::to_string(cfg.d_model);
    m["model.n_layers"] = std::to_string(cfg.n_layers);
    m["model.n_heads"] = std::to_string(cfg.n_heads);
    m["model.mlp_ratio"] = csv::fmt_exact(cfg.mlp_ratio);
    m["model.lora_rank"] = std::to_string(cfg.lora_rank);
    m["model.lora_alpha"] = csv::fmt_exact(cfg.lora_alpha);
    m["model.lora_q"] = cfg.lora_q ? "1" : "0";
    m["model.lora_k"] = cfg.lora_k ? "1" : "0";
    m["model.lora_v"] = cfg.lora_v ? "1" : "0";
    m["model.lora_o"] = cfg.lora_o ? "1" : "0";
    m["model.freeze_backbone"] = cfg.freeze_backbone ? "1" : "0";
    m["model.variant"] = gen::variant_name(cfg.variant);
    return m;
}

ModelConfig config_from_metadata(const std::map<std::string, std::string>& meta) {
    auto need = [&meta](const std::string& key) -> const std::string& {
        auto it = meta.find(key);
        if (it == meta.end()) {
            throw std::runtime_error("checkpoint: missing metadata key " + key);
        }
        return it->second;
    };
    ModelConfig cfg;
    cfg.image_size = std::stoi(need("model.image_size"));
    cfg.patch_size = std::stoi(need("model.patch_size"));
    cfg.d_model = std::stoi(need("model.d_model"));
    cfg.n_layers = std::stoi(need("model.n_layers"));
    cfg.n_heads = std::stoi(need("model.n_heads"));
    cfg.mlp_ratio = std::stod(need("model.mlp_ratio"));
    cfg.lora_rank = std::stoi(need("model.lora_rank"));
    cfg.lora_alpha = std::stod(need("model.lora_alpha"));
    cfg.lora_q = need("model.lora_q") == "1";
    cfg.lora_k = need("model.lora_k") == "1";
    cfg.lora_v = need("model.lora_v") == "1";
    cfg.lora_o = need("model.lora_o") == "1";
    cfg.freeze_backbone = need("model.freeze_backbone") == "1";
    auto v = gen::parse_variant(need("model.variant"));
    if (!v) throw std::runtime_error("checkpoint: bad variant in metadata");
    cfg.variant = *v;
    return cfg;
}

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::map<std::string, std::string>& metadata,
                     const std::map<std::string, Eigen::MatrixXd>& extra) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out.write(kMagic, 8);
    put_u32(out, kVersion);

    auto meta = config_to_metadata(params.cfg);
    for (const auto& [k, v] : metadata) meta[k] = v;
    put_u32(out, static_cast<uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        put_str(out, k);
        put_str(out, v);
    }

    auto refs = tensor_refs(const_cast<ModelParams&>(params));
    put_u32(out, static_cast<uint32_t>(refs.size() + extra.size()));
    // Shapes are recoverable from the config; params are stored flat n x 1.
    for (const auto& r : refs) {
        put_tensor(out, r.name, r.data, static_cast<uint32_t>(r.size), 1);
    }
    for (const auto& [name, m] : extra) {
        put_tensor(out, "extra." + name, m.data(), static_cast<uint32_t>(m.rows()),
                   static_cast<uint32_t>(m.cols()));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    uint32_t version = get_u32(in);
    if (version != kVersion) {
        throw std::runtime_error("checkpoint: unsupported version " +
                                 std::to_string(version));
    }
    Checkpoint ck;
    uint32_t n_meta = get_u32(in);
    for (uint32_t i = 0; i < n_meta; ++i) {
        std::string k = get_str(in);
        ck.metadata[k] = get_str(in);
    }
    ck.params = make_empty(config_from_metadata(ck.metadata));
    auto refs = tensor_refs(ck.params);
    std::map<std::string, TensorRef*> by_name;
    for (auto& r : refs) by_name[r.name] = &r;

    uint32_t n_tensors = get_u32(in);
    std::size_t filled = 0;
    for (uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = get_str(in);
        int dtype = in.get();
        if (dtype != 0) throw std::runtime_error("checkpoint: unsupported dtype");
        uint32_t rows = get_u32(in);
        uint32_t cols = get_u32(in);
        std::size_t count = static_cast<std::size_t>(rows) * cols;
        if (name.starts_with("extra.")) {
            Eigen::MatrixXd m(rows, cols);
            in.read(reinterpret_cast<char*>(m.data()),
                    static_cast<std::streamsize>(sizeof(double) * count));
            ck.extra[name.substr(6)] = std::move(m);
        } else {
            auto it = by_name.find(name);
            if (it == by_name.end()) {
                throw std::runtime_error("checkpoint: unknown tensor " + name);
            }
            if (static_cast<std::size_t>(it->second->size) != count) {
                throw std::runtime_error("checkpoint: shape mismatch for " + name);
            }
            in.read(reinterpret_cast<char*>(it->second->data),
                    static_cast<std::streamsize>(sizeof(double) * count));
            ++filled;
        }
        if (!in) throw std::runtime_error("checkpoint: truncated file " + path);
    }
    if (filled != refs.size()) {
        throw std::runtime_error("checkpoint: missing tensors in " + path);
    }
    return ck;
}

} // namespace linevit::vit
