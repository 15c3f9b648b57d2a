#pragma once

#include <optional>
#include <string>
#include <vector>

#include "explora/lora.hpp"
#include "explora/ops.hpp"
#include "explora/rng.hpp"
#include "explora/tensor.hpp"

namespace explora {

struct ViTConfig {
    int64_t image_size = 32;
    int64_t patch_size = 8;
    int64_t in_channels = 3;
    // channel indices per group; empty means one group with all channels
    std::vector<std::vector<int64_t>> channel_groups;
    int64_t depth = 6;
    int64_t dim = 64;
    int64_t heads = 4;
    double mlp_ratio = 4.0;
    DType dtype = DType::f32;

    void validate() const;
    std::vector<std::vector<int64_t>> groups() const;
    int64_t num_groups() const { return static_cast<int64_t>(groups().size()); }
    int64_t grid_size() const { return image_size / patch_size; }
    int64_t patches_per_group() const { return grid_size() * grid_size(); }
    int64_t num_patches() const { return num_groups() * patches_per_group(); }
    int64_t seq_len() const { return 1 + num_patches(); }
    int64_t mlp_dim() const { return static_cast<int64_t>(mlp_ratio * static_cast<double>(dim)); }

    bool operator==(const ViTConfig&) const = default;

    // canonical ViT-L / ViT-B presets (image 224, patch 16) and the desk-scale
    // model used throughout the tests
    static ViTConfig vit_large();
    static ViTConfig vit_base();
    static ViTConfig desk();
};

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
    std::optional<LoRAAdapter> adapter;

    int64_t in_dim() const { return weight.dim(0); }
    int64_t out_dim() const { return weight.dim(1); }
    Tensor forward(const Tensor& x) const;  // x [..., in] -> [..., out]

    static Linear init(int64_t in, int64_t out, Rng& rng, DType dt, double stddev = 0.02);
};

struct LayerNormLayer {
    Tensor gamma, beta;
    Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, 1e-6); }
    static LayerNormLayer init(int64_t dim, DType dt);
};

struct Block {
    LayerNormLayer ln1, ln2;
    Linear wq, wk, wv, wo;  // attention projections, all [d, d]
    Linear w1, w2;          // mlp [d, m], [m, d]

    static Block init(int64_t dim, int64_t mlp_dim, Rng& rng, DType dt);
};

struct NamedParam {
    std::string name;
    Tensor tensor;  // shared handle into the model
};

struct ViTModel {
    ViTConfig config;
    std::vector<Linear> patch_embeds;  // per group: [|G| p^2, d]
    std::vector<Tensor> pos_embeds;    // per group: [N_g, d]
    Tensor cls_token;                  // [d]
    std::vector<Block> blocks;

    static ViTModel init(const ViTConfig& cfg, Rng& rng);

    // Deterministic parameter walk; adapter factors appear right after their
    // host linear's bias as <linear>.lora_a / <linear>.lora_b.
    std::vector<NamedParam> named_params() const;
    ViTModel clone() const;
    void set_all_requires_grad(bool v);
    bool has_adapters() const;
};

// block-stack forward options; attn_block is 1-indexed, 0 keeps nothing
enum class Collect { final_only, all_blocks };

struct ForwardOptions {
    Collect collect = Collect::final_only;
    int64_t attn_block = 0;
    double drop_path = 0.0;  // per-sample residual-branch drop probability
    Rng* rng = nullptr;      // required when drop_path > 0
};

struct ForwardResult {
    Tensor cls;      // [B, d]
    Tensor patches;  // [B, N, d]
    std::vector<Tensor> all_cls;      // per block when collect == all_blocks
    std::vector<Tensor> all_patches;  // per block
    Tensor attention;  // [B, H, T, T], detached, when attn_block > 0
};

// Non-overlapping p x p patches per channel group, row-major patch order,
// channel-major flattening inside each patch. Accepts [C,H,W] or [B,C,H,W].
std::vector<Tensor> patchify(const Tensor& images, const ViTConfig& cfg);
Tensor unpatchify(const std::vector<Tensor>& groups, const ViTConfig& cfg, int64_t image_size = 0);

// Embedded, position-encoded patch tokens [B, N, d]; the positional table is
// bilinearly resampled when the input resolution differs from the config.
Tensor patch_tokens(const ViTModel& model, const Tensor& images);
Tensor with_cls(const ViTModel& model, const Tensor& tokens);

// Runs the block stack over a prepared token sequence [B, T, d].
ForwardResult run_blocks(const ViTModel& model, Tensor tokens, const ForwardOptions& opts = {});

// Bare block-stack pass (used by the reconstruction decoder).
Tensor run_block_stack(const std::vector<Block>& blocks, Tensor tokens, int64_t heads);

ForwardResult vit_forward(const ViTModel& model, const Tensor& images, const ForwardOptions& opts = {});

// Per-map sigma clipping followed by min-max normalization to [0,1]; a
// constant map is returned unchanged. Statistics are population mean/std of
// the full map, computed before clipping.
Tensor attention_summary(const Tensor& scores, double sigma_clip = 5.0);

// bilinear resampling matrix [grid_new^2, grid_old^2] for positional tables
Tensor pos_interp_matrix(int64_t grid_old, int64_t grid_new, DType dt);

} // namespace explora
