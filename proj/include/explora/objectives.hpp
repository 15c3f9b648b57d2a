#pragma once

#include <utility>
#include <vector>

#include "explora/peft.hpp"
#include "explora/vit.hpp"

namespace explora {

// ----------------------------------------------------------------------------
// masked-autoencoder objective

struct MAEConfig {
    double mask_ratio = 0.75;
    int64_t decoder_depth = 2;
    int64_t decoder_dim = 32;
    int64_t decoder_heads = 4;
    int64_t decoder_rank = 4;  // r' adapters when the decoder is frozen
    bool norm_pix = true;
    enum class LossOn { masked, visible, all };
    LossOn loss_on = LossOn::masked;

    void validate() const;
};

// Uniform without-replacement split of {0..num_patches-1}; |masked| =
// floor(ratio * num_patches). Both index lists come back sorted.
std::pair<std::vector<int64_t>, std::vector<int64_t>> mae_mask(int64_t num_patches, double ratio,
                                                               Rng& rng);

// MSE over the selected patch set. pred/target are [B, N, patch_dim]; with
// norm_pix each target patch is standardized (per-patch mean/var, eps 1e-6)
// before the comparison.
Tensor mae_loss(const Tensor& pred, const Tensor& target, const std::vector<int64_t>& masked_idx,
                bool norm_pix, MAEConfig::LossOn loss_on = MAEConfig::LossOn::masked);

struct MAEDecoder {
    Linear embed;       // d_enc -> d_dec
    Tensor mask_token;  // [d_dec]
    Tensor pos;         // [N, d_dec]
    std::vector<Block> blocks;
    Linear pred;  // d_dec -> patch_dim
    int64_t heads = 4;

    static MAEDecoder init(const ViTConfig& enc_cfg, const MAEConfig& cfg, Rng& rng);
    std::vector<NamedParam> named_params() const;
    MAEDecoder clone() const;
    void set_all_requires_grad(bool v);
    bool has_adapters() const;
};

// Extended-pre-training decoder recipe: everything frozen except layer norms
// and the mask token; rank-r' adapters on Q,V. No decoder block is unfrozen.
void inject_decoder(MAEDecoder& dec, int64_t rank, Rng& rng);

struct MAEStepResult {
    double loss = 0.0;
    int64_t encoder_patch_tokens = 0;  // visible patches processed by the encoder
};

// One forward/backward pass; gradients accumulate into trainable parameters.
// loss_scale multiplies the loss before backward (gradient accumulation).
MAEStepResult mae_step(const ViTModel& encoder, const MAEDecoder& decoder, const Tensor& images,
                       const MAEConfig& cfg, Rng& rng, double loss_scale = 1.0);

// ----------------------------------------------------------------------------
// Dino-style self-distillation objective

struct DinoConfig {
    int64_t prototypes = 256;  // K
    int64_t head_hidden = 128;
    int64_t head_bottleneck = 32;
    double student_temp = 0.1;
    double teacher_temp_warmup = 0.04;
    double teacher_temp_final = 0.07;
    double teacher_temp_warmup_frac = 0.2;  // linear ramp over this fraction of total iters
    double ema_initial = 0.994;             // cosine ramp to 1.0 by the end of training
    double koleo_weight = 0.1;
    int64_t sinkhorn_iters = 3;
    bool ibot_enabled = true;
    double ibot_mask_min = 0.1, ibot_mask_max = 0.5;  // ratio range, applied to half the batch
    int64_t n_local_crops = 2;
    double local_area_min = 0.05, local_area_max = 0.32;
    double global_area_min = 0.32;
    int64_t global_size = 32, local_size = 16;
    int64_t head_freeze_iters = 0;  // paper-scale default is 3000

    void validate() const;
    static DinoConfig paper_scale();
};

struct DinoHead {
    Linear l1, l2, l3;  // d -> hidden -> hidden -> bottleneck
    Tensor prototypes;  // [bottleneck, K], bias-free

    static DinoHead init(int64_t dim, const DinoConfig& cfg, Rng& rng);
    // [rows, d] -> [rows, K]; bottleneck output is L2-normalized per row
    Tensor forward(const Tensor& feats) const;
    std::vector<NamedParam> named_params() const;
    DinoHead clone() const;
    void set_requires_grad(bool v);
};

// exp(scores / temp), alternately column- then row-normalized `iters` times,
// ending on rows. Pure data op (teacher side), never recorded on a tape.
Tensor sinkhorn_center(const Tensor& scores, int64_t iters, double teacher_temp);

// Kozachenko-Leonenko spread regularizer on L2-normalized rows:
// -(1/n) sum_i log(distance to nearest other row). Distances are clamped at
// 1e-8 so duplicate rows stay finite; duplicate_count reports how many rows
// hit the clamp.
Tensor koleo(const Tensor& features, int64_t* duplicate_count = nullptr);

// teacher <- lambda * teacher + (1 - lambda) * student, matched by name
void ema_update(const std::vector<NamedParam>& teacher, const std::vector<NamedParam>& student,
                double lambda);

double ema_lambda_at(double initial, int64_t iter, int64_t total_iters);
double teacher_temp_at(const DinoConfig& cfg, int64_t iter, int64_t total_iters);

// mean over rows of -sum_k p_teacher[k] * logp_student[k]
Tensor dino_ce(const Tensor& teacher_probs, const Tensor& student_logprobs);

struct CropSet {
    std::vector<Tensor> globals;  // size 2
    std::vector<Tensor> locals;
};
CropSet make_crops(const Tensor& images, const DinoConfig& cfg, Rng& rng);

// Catmull-Rom bicubic resize of [B,C,H,W] or [C,H,W] image data (pure data op)
Tensor bicubic_resize(const Tensor& images, int64_t out_h, int64_t out_w);

struct DinoState {
    ViTModel student;
    DinoHead head_s;
    Tensor mask_token;  // [d], student-only, used for iBOT token replacement
    ViTModel teacher;
    DinoHead head_t;

    static DinoState init(const ViTModel& base, const DinoConfig& cfg, Rng& rng);
    std::vector<NamedParam> student_tree() const;  // backbone + head, canonical names
    std::vector<NamedParam> teacher_tree() const;
    void ema(double lambda);
};

struct DinoStepResult {
    double total = 0.0, dino = 0.0, ibot = 0.0, koleo = 0.0;
};

// One student forward/backward over a fresh multi-crop view set; the teacher
// runs grad-free. EMA is the caller's job (after the optimizer step).
DinoStepResult dino_step(DinoState& state, const Tensor& images, const DinoConfig& cfg, int64_t iter,
                         int64_t total_iters, Rng& rng, double loss_scale = 1.0);

} // namespace explora
