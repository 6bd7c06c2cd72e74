#pragma once

#include "linevit/targets.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace linevit::vit {

using targets::DatasetVariant;
using targets::Task;

struct TaskHeadSpec {
    Task task;
    int out_dim; // angle 1, coords 4, noise 1, length 1, width 1, color 3
};

// Head list per dataset: I = {angle, coords, noise}, II adds length,
// III adds width, IV adds color.
std::vector<TaskHeadSpec> heads_for(DatasetVariant v);

struct ModelConfig {
    int image_size = 64;
    int patch_size = 8;
    int channels = 3;
    int d_model = 64;  // reference backbone uses 768
    int n_layers = 4;
    int n_heads = 4;
    double mlp_ratio = 4.0;
    int lora_rank = 8;
    double lora_alpha = 8.0; // scale = lora_alpha / lora_rank
    bool lora_q = true, lora_k = true, lora_v = true, lora_o = true;
    bool freeze_backbone = true;
    DatasetVariant variant = DatasetVariant::II;

    int patches_per_side() const { return image_size / patch_size; }
    int n_patches() const { return patches_per_side() * patches_per_side(); }
    int n_tokens() const { return n_patches() + 1; } // class token first
    int patch_dim() const { return patch_size * patch_size * channels; }
    int d_ff() const { return static_cast<int>(d_model * mlp_ratio); }
    int head_dim() const { return d_model / n_heads; }
    double lora_scale() const { return lora_alpha / lora_rank; }

    void validate() const; // throws ConfigError
};

// Dense weight with optional low-rank adapter. Effective weight is
// W + (alpha/r) * B * A; the adapted path is computed additively, so a
// zero B leaves the base mapping bit-identical.
struct Linear {
    Eigen::MatrixXd w;      // out x in
    Eigen::VectorXd bias;   // out
    Eigen::MatrixXd lora_a; // r x in  (empty when no adapter)
    Eigen::MatrixXd lora_b; // out x r
    bool has_lora() const { return lora_a.size() > 0; }
};

struct BlockParams {
    Eigen::VectorXd ln1_g, ln1_b;
    Linear q, k, v, o;
    Eigen::VectorXd ln2_g, ln2_b;
    Linear fc1, fc2;
};

struct HeadParams {
    Task task;
    Linear lin;
};

struct ModelParams {
    ModelConfig cfg;
    Linear patch_embed;        // d_model x patch_dim
    Eigen::VectorXd cls_token; // d_model
    Eigen::MatrixXd pos_embed; // n_tokens x d_model
    std::vector<BlockParams> blocks;
    Eigen::VectorXd final_ln_g, final_ln_b;
    std::vector<HeadParams> heads;
};

enum class ParamRole { backbone, lora, head };

// Flat view over every tensor, in a fixed traversal order shared by any two
// ModelParams of the same config. AdamW, checkpointing, counting and the
// finite-difference harness all run off this.
struct TensorRef {
    std::string name;
    double* data;
    std::ptrdiff_t size;
    ParamRole role;
};
std::vector<TensorRef> tensor_refs(ModelParams& p);

inline bool is_trainable(ParamRole role, bool freeze_backbone) {
    return !(freeze_backbone && role == ParamRole::backbone);
}

// Backbone ~ truncated normal(0, 0.02) (cut at 2 sigma), biases and LoRA B
// zero, layernorm gains one, LoRA A ~ normal(0, 0.02). Deterministic in seed.
ModelParams init_params(const ModelConfig& cfg, uint64_t seed);
ModelParams zeros_like(const ModelParams& p);

int64_t count_params(const ModelParams& p);
int64_t count_trainable(const ModelParams& p);

// B x dim prediction matrix per task; angle in [-1,1] via tanh, all other
// heads in [0,1] via the logistic.
using TaskOutputs = std::map<Task, Eigen::MatrixXd>;

// Activations retained by a forward pass for backprop. Layout is an
// implementation detail shared with the trainer.
struct BlockCache {
    Eigen::MatrixXd x_in;            // T x d, block input
    Eigen::MatrixXd ln1_xhat, ln1_out;
    Eigen::VectorXd ln1_rstd;
    Eigen::MatrixXd qm, km, vm;      // T x d after projections
    Eigen::MatrixXd u_q, u_k, u_v, u_o; // T x r LoRA intermediates
    std::vector<Eigen::MatrixXd> probs; // per head, T x T softmax rows
    Eigen::MatrixXd attn_cat;        // T x d, heads concatenated
    Eigen::MatrixXd x_mid;           // T x d, after attention residual
    Eigen::MatrixXd ln2_xhat, ln2_out;
    Eigen::VectorXd ln2_rstd;
    Eigen::MatrixXd mlp_pre, mlp_act; // T x d_ff
};

struct SampleCache {
    Eigen::MatrixXd patches; // N x patch_dim
    Eigen::MatrixXd x0;      // T x d tokens after embedding + positions
    std::vector<BlockCache> blocks;
    Eigen::MatrixXd final_xhat; // T x d
    Eigen::VectorXd final_rstd;
    Eigen::RowVectorXd feature; // pooled class-token feature
};

struct ForwardCaches {
    std::vector<SampleCache> samples;
    TaskOutputs outputs; // activated head outputs
};

// images: B x (H*W*3), row-major interleaved RGB scaled to [0,1].
TaskOutputs forward(const ModelParams& params, const Eigen::MatrixXd& images,
                    ForwardCaches* caches = nullptr, int n_threads = 1);

Eigen::MatrixXd images_to_matrix(const std::vector<ImageCanvas>& imgs);

// Reverse-mode gradients for d(loss)/d(activated outputs). Frozen tensors
// come back as zero blocks when the config freezes the backbone.
ModelParams backprop(const ModelParams& params, const Eigen::MatrixXd& images,
                     const ForwardCaches& caches, const TaskOutputs& d_outputs,
                     int n_threads = 1);

// Folds (alpha/r) * B * A into the dense weights and zeroes B, so the merged
// model's forward matches the adapted one without adapter arithmetic.
ModelParams merge_lora(const ModelParams& params);

// Post-softmax attention restricted to patch tokens (class token sliced off,
// rows renormalized), averaged over the probe batch.
struct AttentionMaps {
    int n_layers = 0, n_heads = 0, n_patches = 0;
    std::vector<Eigen::MatrixXd> maps; // [layer * n_heads + head], patch x patch
    const Eigen::MatrixXd& at(int layer, int head) const {
        return maps[static_cast<std::size_t>(layer) * n_heads + head];
    }
};
AttentionMaps extract_attention_maps(const ModelParams& params,
                                     const Eigen::MatrixXd& probe_images);

// Checkpoint container: little-endian binary, string metadata plus named
// f64 tensors (column-major). Layout documented in the README.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::map<std::string, std::string>& metadata = {},
                     const std::map<std::string, Eigen::MatrixXd>& extra = {});

struct Checkpoint {
    ModelParams params;
    std::map<std::string, std::string> metadata;
    std::map<std::string, Eigen::MatrixXd> extra;
};
Checkpoint load_checkpoint(const std::string& path);

std::map<std::string, std::string> config_to_metadata(const ModelConfig& cfg);
ModelConfig config_from_metadata(const std::map<std::string, std::string>& meta);

} // namespace linevit::vit
