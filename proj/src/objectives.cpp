#include "explora/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <tuple>

namespace explora {

namespace op = ops;

void MAEConfig::validate() const {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
        throw ContractError("MAEConfig: mask_ratio must lie in (0, 1)");
    if (decoder_depth <= 0 || decoder_dim <= 0 || decoder_heads <= 0)
        throw ContractError("MAEConfig: decoder sizes must be positive");
    if (decoder_dim % decoder_heads != 0)
        throw ContractError("MAEConfig: decoder_dim not divisible by decoder_heads");
    if (decoder_rank < 0) throw ContractError("MAEConfig: decoder_rank must be >= 0");
}

std::pair<std::vector<int64_t>, std::vector<int64_t>> mae_mask(int64_t num_patches, double ratio,
                                                               Rng& rng) {
    if (num_patches <= 0) throw ContractError("mae_mask: num_patches must be positive");
    if (ratio < 0.0 || ratio >= 1.0)
        throw ContractError("mae_mask: ratio must lie in [0, 1), got " + std::to_string(ratio));
    const int64_t n_masked = static_cast<int64_t>(std::floor(ratio * static_cast<double>(num_patches)));
    std::vector<int64_t> order = rng.permutation(num_patches);
    std::vector<int64_t> masked(order.begin(), order.begin() + n_masked);
    std::vector<int64_t> visible(order.begin() + n_masked, order.end());
    std::sort(masked.begin(), masked.end());
    std::sort(visible.begin(), visible.end());
    return {visible, masked};
}

namespace {

Tensor normalize_patches(const Tensor& target) {
    NoGrad ng;
    Tensor out = target.clone();
    out.set_requires_grad(false);
    const int64_t rows = target.numel() / target.dim(-1);
    const int64_t pd = target.dim(-1);
    for (int64_t r = 0; r < rows; ++r) {
        double mu = 0;
        for (int64_t j = 0; j < pd; ++j) mu += target.at(r * pd + j);
        mu /= static_cast<double>(pd);
        double var = 0;
        for (int64_t j = 0; j < pd; ++j) {
            const double c = target.at(r * pd + j) - mu;
            var += c * c;
        }
        var /= static_cast<double>(pd);
        const double rstd = 1.0 / std::sqrt(var + 1e-6);
        for (int64_t j = 0; j < pd; ++j) out.set(r * pd + j, (target.at(r * pd + j) - mu) * rstd);
    }
    return out;
}

} // namespace

Tensor mae_loss(const Tensor& pred, const Tensor& target, const std::vector<int64_t>& masked_idx,
                bool norm_pix, MAEConfig::LossOn loss_on) {
    if (pred.shape() != target.shape())
        throw ShapeError("mae_loss: pred " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
    if (pred.rank() != 3) throw ShapeError("mae_loss: expected [B, N, patch_dim]");
    const int64_t n = pred.dim(1);
    Tensor tgt = norm_pix ? normalize_patches(target) : target;

    std::vector<int64_t> sel;
    switch (loss_on) {
        case MAEConfig::LossOn::masked: sel = masked_idx; break;
        case MAEConfig::LossOn::visible: {
            std::vector<bool> is_masked(static_cast<size_t>(n), false);
            for (int64_t m : masked_idx) is_masked[static_cast<size_t>(m)] = true;
            for (int64_t i = 0; i < n; ++i)
                if (!is_masked[static_cast<size_t>(i)]) sel.push_back(i);
            break;
        }
        case MAEConfig::LossOn::all:
            for (int64_t i = 0; i < n; ++i) sel.push_back(i);
            break;
    }
    if (sel.empty()) throw ContractError("mae_loss: empty loss set");
    Tensor p = op::index_select(pred, 1, sel);
    Tensor t = op::index_select(tgt, 1, sel);
    return op::mse(p, t);
}

MAEDecoder MAEDecoder::init(const ViTConfig& enc_cfg, const MAEConfig& cfg, Rng& rng) {
    enc_cfg.validate();
    cfg.validate();
    const auto groups = enc_cfg.groups();
    const int64_t pd = static_cast<int64_t>(groups[0].size()) * enc_cfg.patch_size * enc_cfg.patch_size;
    for (const auto& g : groups)
        if (static_cast<int64_t>(g.size()) * enc_cfg.patch_size * enc_cfg.patch_size != pd)
            throw ContractError("MAEDecoder: channel groups must share a patch dim");
    MAEDecoder d;
    d.heads = cfg.decoder_heads;
    d.embed = Linear::init(enc_cfg.dim, cfg.decoder_dim, rng, enc_cfg.dtype);
    d.mask_token = Tensor::randn({cfg.decoder_dim}, rng, 0.02, enc_cfg.dtype);
    d.mask_token.set_requires_grad(true);
    d.pos = Tensor::randn({enc_cfg.num_patches(), cfg.decoder_dim}, rng, 0.02, enc_cfg.dtype);
    d.pos.set_requires_grad(true);
    const int64_t mlp = cfg.decoder_dim * 4;
    for (int64_t i = 0; i < cfg.decoder_depth; ++i)
        d.blocks.push_back(Block::init(cfg.decoder_dim, mlp, rng, enc_cfg.dtype));
    d.pred = Linear::init(cfg.decoder_dim, pd, rng, enc_cfg.dtype);
    return d;
}

namespace {

void push_linear_np(std::vector<NamedParam>& out, const std::string& prefix, const Linear& l) {
    out.push_back({prefix + ".weight", l.weight});
    out.push_back({prefix + ".bias", l.bias});
    if (l.adapter.has_value()) {
        out.push_back({prefix + ".lora_a", l.adapter->a});
        out.push_back({prefix + ".lora_b", l.adapter->b});
    }
}

void push_block_np(std::vector<NamedParam>& out, const std::string& p, const Block& b) {
    out.push_back({p + ".ln1.gamma", b.ln1.gamma});
    out.push_back({p + ".ln1.beta", b.ln1.beta});
    push_linear_np(out, p + ".attn.wq", b.wq);
    push_linear_np(out, p + ".attn.wk", b.wk);
    push_linear_np(out, p + ".attn.wv", b.wv);
    push_linear_np(out, p + ".attn.wo", b.wo);
    out.push_back({p + ".ln2.gamma", b.ln2.gamma});
    out.push_back({p + ".ln2.beta", b.ln2.beta});
    push_linear_np(out, p + ".mlp.w1", b.w1);
    push_linear_np(out, p + ".mlp.w2", b.w2);
}

Linear clone_linear_full(const Linear& l) {
    Linear c;
    c.weight = l.weight.clone();
    c.bias = l.bias.clone();
    if (l.adapter.has_value()) {
        LoRAAdapter ad;
        ad.a = l.adapter->a.clone();
        ad.b = l.adapter->b.clone();
        ad.rank = l.adapter->rank;
        ad.alpha = l.adapter->alpha;
        c.adapter = std::move(ad);
    }
    return c;
}

Block clone_block(const Block& b) {
    Block c;
    c.ln1.gamma = b.ln1.gamma.clone();
    c.ln1.beta = b.ln1.beta.clone();
    c.ln2.gamma = b.ln2.gamma.clone();
    c.ln2.beta = b.ln2.beta.clone();
    c.wq = clone_linear_full(b.wq);
    c.wk = clone_linear_full(b.wk);
    c.wv = clone_linear_full(b.wv);
    c.wo = clone_linear_full(b.wo);
    c.w1 = clone_linear_full(b.w1);
    c.w2 = clone_linear_full(b.w2);
    return c;
}

} // namespace

std::vector<NamedParam> MAEDecoder::named_params() const {
    std::vector<NamedParam> out;
    push_linear_np(out, "embed", embed);
    out.push_back({"mask_token", mask_token});
    out.push_back({"pos", pos});
    for (size_t i = 0; i < blocks.size(); ++i) push_block_np(out, "blocks." + std::to_string(i), blocks[i]);
    push_linear_np(out, "pred", pred);
    return out;
}

MAEDecoder MAEDecoder::clone() const {
    MAEDecoder d;
    d.heads = heads;
    d.embed = clone_linear_full(embed);
    d.mask_token = mask_token.clone();
    d.pos = pos.clone();
    for (const Block& b : blocks) d.blocks.push_back(clone_block(b));
    d.pred = clone_linear_full(pred);
    return d;
}

void MAEDecoder::set_all_requires_grad(bool v) {
    for (NamedParam& np : named_params()) np.tensor.set_requires_grad(v);
}

bool MAEDecoder::has_adapters() const {
    for (const Block& b : blocks)
        for (const Linear* l : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2})
            if (l->adapter.has_value()) return true;
    return false;
}

void inject_decoder(MAEDecoder& dec, int64_t rank, Rng& rng) {
    if (dec.has_adapters()) throw StateError("inject_decoder: adapters already present");
    dec.set_all_requires_grad(false);
    inject_block_stack(dec.blocks, /*unfrozen=*/{}, rank, static_cast<double>(rank),
                       {Target::q, Target::v}, /*norms_unfrozen=*/true, rng);
    dec.mask_token.set_requires_grad(true);
}

MAEStepResult mae_step(const ViTModel& encoder, const MAEDecoder& decoder, const Tensor& images,
                       const MAEConfig& cfg, Rng& rng, double loss_scale) {
    cfg.validate();
    const ViTConfig& ec = encoder.config;
    auto patch_groups = patchify(images, ec);
    Tensor targets = patch_groups.size() == 1 ? patch_groups[0] : op::concat(patch_groups, 1);
    targets.set_requires_grad(false);
    const int64_t n = targets.dim(1);
    const int64_t batch = targets.dim(0);

    auto [visible, masked] = mae_mask(n, cfg.mask_ratio, rng);
    if (visible.empty()) throw ContractError("mae_step: mask left no visible patches");

    Tensor tokens = patch_tokens(encoder, images);        // [B, N, d]
    Tensor vis_tokens = op::index_select(tokens, 1, visible);
    ForwardResult enc_out = run_blocks(encoder, with_cls(encoder, vis_tokens));

    // decode: [cls, visible..., masked...] with positional entries, then put
    // patch rows back into canonical order for the prediction head
    const int64_t dd = decoder.embed.out_dim();
    Tensor dcls = op::reshape(decoder.embed.forward(enc_out.cls), {batch, 1, dd});
    Tensor dvis = decoder.embed.forward(enc_out.patches);  // [B, |v|, dd]
    Tensor pos_vis = op::index_select(decoder.pos, 0, visible);
    dvis = op::add(dvis, pos_vis);
    Tensor parts = dvis;
    if (!masked.empty()) {
        const int64_t m = static_cast<int64_t>(masked.size());
        Tensor mtok = op::reshape(op::expand_leading(decoder.mask_token, batch * m), {batch, m, dd});
        Tensor pos_masked = op::index_select(decoder.pos, 0, masked);
        mtok = op::add(mtok, pos_masked);
        parts = op::concat({dvis, mtok}, 1);
    }
    Tensor seq = op::concat({dcls, parts}, 1);
    Tensor dec_out = run_block_stack(decoder.blocks, seq, decoder.heads);
    Tensor patch_rows = op::slice(dec_out, 1, 1, n);
    // rows are ordered [visible..., masked...]; invert that permutation
    std::vector<int64_t> perm(visible.begin(), visible.end());
    perm.insert(perm.end(), masked.begin(), masked.end());
    std::vector<int64_t> inv(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) inv[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
    Tensor ordered = op::index_select(patch_rows, 1, inv);
    Tensor pred = decoder.pred.forward(ordered);  // [B, N, patch_dim]

    Tensor loss = mae_loss(pred, targets, masked, cfg.norm_pix, cfg.loss_on);
    MAEStepResult res;
    res.loss = loss.item();
    res.encoder_patch_tokens = static_cast<int64_t>(visible.size());
    if (!std::isfinite(res.loss)) throw NumericError("mae_step: non-finite loss");
    if (Tape* tape = Tape::active()) {
        Tensor scaled = loss_scale == 1.0 ? loss : op::scale(loss, loss_scale);
        tape->backward(scaled);
    }
    return res;
}

// ----------------------------------------------------------------------------
// Dino-style stack

void DinoConfig::validate() const {
    if (prototypes <= 0 || head_hidden <= 0 || head_bottleneck <= 0)
        throw ContractError("DinoConfig: head sizes must be positive");
    if (student_temp <= 0 || teacher_temp_warmup <= 0 || teacher_temp_final <= 0)
        throw ContractError("DinoConfig: temperatures must be positive");
    if (ema_initial < 0.0 || ema_initial > 1.0)
        throw ContractError("DinoConfig: ema_initial must lie in [0, 1]");
    if (!(local_area_min > 0.0 && local_area_max < 1.0 && local_area_min <= local_area_max))
        throw ContractError("DinoConfig: local crop area range must lie within (0, 1)");
    if (!(ibot_mask_min > 0.0 && ibot_mask_max < 1.0 && ibot_mask_min <= ibot_mask_max))
        throw ContractError("DinoConfig: ibot mask range must lie within (0, 1)");
    if (sinkhorn_iters < 1) throw ContractError("DinoConfig: sinkhorn_iters must be >= 1");
    if (n_local_crops < 0) throw ContractError("DinoConfig: n_local_crops must be >= 0");
    if (koleo_weight < 0) throw ContractError("DinoConfig: koleo_weight must be >= 0");
}

DinoConfig DinoConfig::paper_scale() {
    DinoConfig c;
    c.prototypes = 65536;
    c.head_hidden = 2048;
    c.head_bottleneck = 256;
    c.n_local_crops = 8;
    c.global_size = 224;
    c.local_size = 98;
    c.head_freeze_iters = 3000;
    return c;
}

DinoHead DinoHead::init(int64_t dim, const DinoConfig& cfg, Rng& rng) {
    cfg.validate();
    DinoHead h;
    const DType dt = DType::f32;
    h.l1 = Linear::init(dim, cfg.head_hidden, rng, dt);
    h.l2 = Linear::init(cfg.head_hidden, cfg.head_hidden, rng, dt);
    h.l3 = Linear::init(cfg.head_hidden, cfg.head_bottleneck, rng, dt);
    h.prototypes = Tensor::randn({cfg.head_bottleneck, cfg.prototypes}, rng, 0.02, dt);
    h.prototypes.set_requires_grad(true);
    return h;
}

Tensor DinoHead::forward(const Tensor& feats) const {
    Tensor h = op::gelu(l1.forward(feats));
    h = op::gelu(l2.forward(h));
    h = l3.forward(h);
    // L2-normalize the bottleneck rows before the prototype projection
    Tensor sq = op::sum_axis(op::mul(h, h), -1, true);
    Tensor norm = op::sqrt(op::clamp_min(sq, 1e-12));
    h = op::div(h, norm);
    return op::matmul(h, prototypes);
}

std::vector<NamedParam> DinoHead::named_params() const {
    std::vector<NamedParam> out;
    push_linear_np(out, "l1", l1);
    push_linear_np(out, "l2", l2);
    push_linear_np(out, "l3", l3);
    out.push_back({"prototypes", prototypes});
    return out;
}

DinoHead DinoHead::clone() const {
    DinoHead h;
    h.l1 = clone_linear_full(l1);
    h.l2 = clone_linear_full(l2);
    h.l3 = clone_linear_full(l3);
    h.prototypes = prototypes.clone();
    return h;
}

void DinoHead::set_requires_grad(bool v) {
    for (NamedParam& np : named_params()) np.tensor.set_requires_grad(v);
}

Tensor sinkhorn_center(const Tensor& scores, int64_t iters, double teacher_temp) {
    if (scores.rank() != 2) throw ShapeError("sinkhorn_center: expected [batch, K]");
    if (iters < 1) throw ContractError("sinkhorn_center: iters must be >= 1");
    if (teacher_temp <= 0) throw ContractError("sinkhorn_center: temperature must be positive");
    if (!scores.all_finite()) throw NumericError("sinkhorn_center: non-finite scores");
    NoGrad ng;
    const int64_t b = scores.dim(0), k = scores.dim(1);
    Tensor p = Tensor::zeros({b, k}, DType::f64);
    double mx = scores.at(0);
    for (int64_t i = 1; i < b * k; ++i) mx = std::max(mx, scores.at(i));
    for (int64_t i = 0; i < b * k; ++i) p.set(i, std::exp((scores.at(i) - mx) / teacher_temp));
    auto pd = p.data<double>();
    for (int64_t it = 0; it < iters; ++it) {
        for (int64_t j = 0; j < k; ++j) {
            double c = 0;
            for (int64_t i = 0; i < b; ++i) c += pd[static_cast<size_t>(i * k + j)];
            if (c > 0)
                for (int64_t i = 0; i < b; ++i) pd[static_cast<size_t>(i * k + j)] /= c;
        }
        for (int64_t i = 0; i < b; ++i) {
            double r = 0;
            for (int64_t j = 0; j < k; ++j) r += pd[static_cast<size_t>(i * k + j)];
            if (r <= 0) throw NumericError("sinkhorn_center: degenerate row " + std::to_string(i));
            for (int64_t j = 0; j < k; ++j) pd[static_cast<size_t>(i * k + j)] /= r;
        }
    }
    Tensor out = p.astype(scores.dtype());
    if (!out.all_finite()) throw NumericError("sinkhorn_center: non-finite output");
    return out;
}

Tensor koleo(const Tensor& features, int64_t* duplicate_count) {
    if (features.rank() != 2 || features.dim(0) < 2)
        throw ContractError("koleo: need at least two feature rows");
    if (!features.all_finite()) throw NumericError("koleo: non-finite features");
    const int64_t b = features.dim(0);
    Tensor sq = op::sum_axis(op::mul(features, features), -1, true);
    Tensor norm = op::sqrt(op::clamp_min(sq, 1e-16));
    Tensor y = op::div(features, norm);
    Tensor gram = op::matmul(y, op::transpose2d(y));  // [b, b]
    // nearest other row = max inner product (unit rows); argmax chosen host-side
    std::vector<int64_t> flat_idx(static_cast<size_t>(b));
    int64_t dups = 0;
    {
        NoGrad ng;
        for (int64_t i = 0; i < b; ++i) {
            int64_t best = -1;
            double best_v = -2.0;
            for (int64_t j = 0; j < b; ++j) {
                if (j == i) continue;
                const double v = gram.at(i * b + j);
                if (v > best_v) {
                    best_v = v;
                    best = j;
                }
            }
            flat_idx[static_cast<size_t>(i)] = i * b + best;
            if (2.0 - 2.0 * best_v < 1e-12) ++dups;
        }
    }
    if (duplicate_count) *duplicate_count = dups;
    Tensor g_sel = op::index_select(op::reshape(gram, {b * b}), 0, flat_idx);  // [b]
    Tensor d2 = op::clamp_min(op::add_scalar(op::scale(g_sel, -2.0), 2.0), 1e-16);
    Tensor dist = op::clamp_min(op::sqrt(d2), 1e-8);
    return op::neg(op::mean(op::log(dist)));
}

void ema_update(const std::vector<NamedParam>& teacher, const std::vector<NamedParam>& student,
                double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw ContractError("ema_update: lambda must lie in [0, 1]");
    if (teacher.size() != student.size())
        throw CompatError("ema_update: parameter trees differ in size (" +
                          std::to_string(teacher.size()) + " vs " + std::to_string(student.size()) + ")");
    NoGrad ng;
    for (size_t i = 0; i < teacher.size(); ++i) {
        const NamedParam& t = teacher[i];
        const NamedParam& s = student[i];
        if (t.name != s.name || t.tensor.shape() != s.tensor.shape() ||
            t.tensor.dtype() != s.tensor.dtype())
            throw CompatError("ema_update: tree mismatch at '" + t.name + "' vs '" + s.name + "'");
        Tensor dst = t.tensor;
        const int64_t n = dst.numel();
        if (dst.dtype() == DType::f32) {
            auto td = dst.data<float>();
            auto sd = s.tensor.data<float>();
            for (int64_t j = 0; j < n; ++j) {
                const size_t u = static_cast<size_t>(j);
                td[u] = static_cast<float>(lambda * td[u] + (1.0 - lambda) * sd[u]);
            }
        } else {
            auto td = dst.data<double>();
            auto sd = s.tensor.data<double>();
            for (int64_t j = 0; j < n; ++j) {
                const size_t u = static_cast<size_t>(j);
                td[u] = lambda * td[u] + (1.0 - lambda) * sd[u];
            }
        }
    }
}

double ema_lambda_at(double initial, int64_t iter, int64_t total_iters) {
    if (total_iters <= 0) return initial;
    const double t = std::clamp(static_cast<double>(iter) / static_cast<double>(total_iters), 0.0, 1.0);
    // cosine ramp from `initial` at t=0 to 1.0 at t=1
    return 1.0 - (1.0 - initial) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

double teacher_temp_at(const DinoConfig& cfg, int64_t iter, int64_t total_iters) {
    const double warm = cfg.teacher_temp_warmup_frac * static_cast<double>(total_iters);
    if (warm <= 0 || static_cast<double>(iter) >= warm) return cfg.teacher_temp_final;
    const double t = static_cast<double>(iter) / warm;
    return cfg.teacher_temp_warmup + t * (cfg.teacher_temp_final - cfg.teacher_temp_warmup);
}

Tensor dino_ce(const Tensor& teacher_probs, const Tensor& student_logprobs) {
    if (teacher_probs.shape() != student_logprobs.shape())
        throw ShapeError("dino_ce: shape mismatch");
    Tensor per_row = op::sum_axis(op::mul(teacher_probs, student_logprobs), -1);
    return op::neg(op::mean(per_row));
}

Tensor bicubic_resize(const Tensor& images, int64_t out_h, int64_t out_w) {
    Tensor in = images;
    bool squeeze = false;
    if (in.rank() == 3) {
        squeeze = true;
        NoGrad ng;
        in = op::reshape(in, {1, in.dim(0), in.dim(1), in.dim(2)});
    }
    if (in.rank() != 4) throw ShapeError("bicubic_resize: expected [C,H,W] or [B,C,H,W]");
    const int64_t b = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
    Tensor out = Tensor::zeros({b, c, out_h, out_w}, in.dtype());
    auto kernel = [](double x) {
        // Catmull-Rom (a = -0.5)
        const double a = -0.5;
        x = std::fabs(x);
        if (x <= 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
        if (x < 2.0) return a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a;
        return 0.0;
    };
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ci = 0; ci < c; ++ci) {
            const int64_t base_in = (bi * c + ci) * h * w;
            const int64_t base_out = (bi * c + ci) * out_h * out_w;
            for (int64_t oy = 0; oy < out_h; ++oy) {
                const double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
                const int64_t y0 = static_cast<int64_t>(std::floor(fy));
                for (int64_t ox = 0; ox < out_w; ++ox) {
                    const double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
                    const int64_t x0 = static_cast<int64_t>(std::floor(fx));
                    double acc = 0, wsum = 0;
                    for (int64_t dy = -1; dy <= 2; ++dy) {
                        const int64_t yy = std::clamp(y0 + dy, int64_t{0}, h - 1);
                        const double wy = kernel(fy - static_cast<double>(y0 + dy));
                        for (int64_t dx = -1; dx <= 2; ++dx) {
                            const int64_t xx = std::clamp(x0 + dx, int64_t{0}, w - 1);
                            const double wx = kernel(fx - static_cast<double>(x0 + dx));
                            acc += wy * wx * in.at(base_in + yy * w + xx);
                            wsum += wy * wx;
                        }
                    }
                    out.set(base_out + oy * out_w + ox, acc / wsum);
                }
            }
        }
    if (squeeze) {
        NoGrad ng;
        out = op::reshape(out, {c, out_h, out_w});
        out.set_requires_grad(false);
    }
    return out;
}

namespace {

Tensor random_resized_crop(const Tensor& images, double area_min, double area_max, int64_t out_size,
                           Rng& rng) {
    NoGrad ng;
    const int64_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    Tensor out = Tensor::zeros({b, c, out_size, out_size}, images.dtype());
    for (int64_t bi = 0; bi < b; ++bi) {
        int64_t cw = w, ch = h, cx = 0, cy = 0;
        for (int attempt = 0; attempt < 10; ++attempt) {
            const double area = rng.uniform(area_min, area_max) * static_cast<double>(h * w);
            const double aspect = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
            const int64_t tw = static_cast<int64_t>(std::lround(std::sqrt(area * aspect)));
            const int64_t th = static_cast<int64_t>(std::lround(std::sqrt(area / aspect)));
            if (tw >= 1 && th >= 1 && tw <= w && th <= h) {
                cw = tw;
                ch = th;
                cx = rng.uniform_int(w - tw + 1);
                cy = rng.uniform_int(h - th + 1);
                break;
            }
        }
        // gather the crop window, then resize
        Tensor window = Tensor::zeros({1, c, ch, cw}, images.dtype());
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < ch; ++y)
                for (int64_t x = 0; x < cw; ++x)
                    window.set((ci * ch + y) * cw + x,
                               images.at(((bi * c + ci) * h + cy + y) * w + cx + x));
        Tensor resized = bicubic_resize(window, out_size, out_size);
        std::memcpy(out.bytes().data() + static_cast<size_t>(bi) * c * out_size * out_size *
                                             dtype_size(out.dtype()),
                    resized.bytes().data(), resized.bytes().size());
    }
    return out;
}

} // namespace

CropSet make_crops(const Tensor& images, const DinoConfig& cfg, Rng& rng) {
    if (images.rank() != 4) throw ShapeError("make_crops: expected [B,C,H,W]");
    CropSet out;
    for (int i = 0; i < 2; ++i)
        out.globals.push_back(random_resized_crop(images, cfg.global_area_min, 1.0, cfg.global_size, rng));
    for (int64_t i = 0; i < cfg.n_local_crops; ++i)
        out.locals.push_back(
            random_resized_crop(images, cfg.local_area_min, cfg.local_area_max, cfg.local_size, rng));
    return out;
}

DinoState DinoState::init(const ViTModel& base, const DinoConfig& cfg, Rng& rng) {
    DinoState s;
    s.student = base.clone();
    s.head_s = DinoHead::init(base.config.dim, cfg, rng);
    s.mask_token = Tensor::randn({base.config.dim}, rng, 0.02, base.config.dtype);
    s.mask_token.set_requires_grad(true);
    s.teacher = s.student.clone();
    s.teacher.set_all_requires_grad(false);
    s.head_t = s.head_s.clone();
    s.head_t.set_requires_grad(false);
    return s;
}

namespace {

std::vector<NamedParam> prefixed(const std::string& prefix, std::vector<NamedParam> params) {
    for (NamedParam& np : params) np.name = prefix + np.name;
    return params;
}

} // namespace

std::vector<NamedParam> DinoState::student_tree() const {
    std::vector<NamedParam> out = prefixed("backbone.", student.named_params());
    for (NamedParam& np : prefixed("head.", head_s.named_params())) out.push_back(np);
    return out;
}

std::vector<NamedParam> DinoState::teacher_tree() const {
    std::vector<NamedParam> out = prefixed("backbone.", teacher.named_params());
    for (NamedParam& np : prefixed("head.", head_t.named_params())) out.push_back(np);
    return out;
}

void DinoState::ema(double lambda) { ema_update(teacher_tree(), student_tree(), lambda); }

DinoStepResult dino_step(DinoState& state, const Tensor& images, const DinoConfig& cfg, int64_t iter,
                         int64_t total_iters, Rng& rng, double loss_scale) {
    cfg.validate();
    if (images.rank() != 4) throw ShapeError("dino_step: expected [B,C,H,W]");
    const int64_t batch = images.dim(0);
    const double temp_t = teacher_temp_at(cfg, iter, total_iters);
    state.head_s.set_requires_grad(iter >= cfg.head_freeze_iters);

    CropSet crops = make_crops(images, cfg, rng);

    // iBOT bookkeeping: one mask over global-crop-0 patches for the first half
    // of the batch, ratio drawn fresh each step
    const int64_t n_glob =
        (cfg.global_size / state.student.config.patch_size) * (cfg.global_size / state.student.config.patch_size);
    const int64_t half = batch / 2;
    std::vector<int64_t> ibot_visible, ibot_masked;
    const bool do_ibot = cfg.ibot_enabled && half > 0;
    if (do_ibot) {
        const double ratio = rng.uniform(cfg.ibot_mask_min, cfg.ibot_mask_max);
        std::tie(ibot_visible, ibot_masked) = mae_mask(n_glob, ratio, rng);
    }

    // ---- teacher (grad-free) ----
    std::vector<Tensor> teacher_probs;  // per global crop [B, K]
    Tensor teacher_patch_probs;         // [(half*|m|), K]
    {
        NoGrad ng;
        for (int i = 0; i < 2; ++i) {
            ForwardResult r = vit_forward(state.teacher, crops.globals[static_cast<size_t>(i)]);
            Tensor scores = state.head_t.forward(r.cls);
            teacher_probs.push_back(sinkhorn_center(scores, cfg.sinkhorn_iters, temp_t));
            if (i == 0 && do_ibot && !ibot_masked.empty()) {
                Tensor masked_rows = op::index_select(op::slice(r.patches, 0, 0, half), 1, ibot_masked);
                const int64_t rows = half * static_cast<int64_t>(ibot_masked.size());
                Tensor flat = op::reshape(masked_rows, {rows, r.patches.dim(2)});
                teacher_patch_probs = sinkhorn_center(state.head_t.forward(flat), cfg.sinkhorn_iters, temp_t);
            }
        }
    }

    Tape tape;
    DinoStepResult parts;

    // ---- student views ----
    std::vector<Tensor> student_logp;  // per view [B, K]
    Tensor student_patch_logp;
    std::vector<Tensor> student_cls;  // global crops only, for koleo
    for (size_t view = 0; view < crops.globals.size() + crops.locals.size(); ++view) {
        const bool global = view < crops.globals.size();
        const Tensor& crop = global ? crops.globals[view] : crops.locals[view - crops.globals.size()];
        ForwardResult r;
        if (view == 0 && do_ibot && !ibot_masked.empty()) {
            // replace masked patch embeddings of the first half with the mask token
            Tensor tokens = patch_tokens(state.student, crop);  // [B, n_glob, d]
            const int64_t d = tokens.dim(2);
            Tensor first = op::slice(tokens, 0, 0, half);
            Tensor rest = op::slice(tokens, 0, half, batch - half);
            Tensor vis = op::index_select(first, 1, ibot_visible);
            const int64_t m = static_cast<int64_t>(ibot_masked.size());
            Tensor mtok = op::reshape(op::expand_leading(state.mask_token, half * m), {half, m, d});
            // masked positions keep their positional component
            Tensor pos = state.student.pos_embeds[0];
            if (n_glob != state.student.config.patches_per_group()) {
                Tensor interp = pos_interp_matrix(state.student.config.grid_size(),
                                                  cfg.global_size / state.student.config.patch_size,
                                                  pos.dtype());
                pos = op::matmul(interp, pos);
            }
            mtok = op::add(mtok, op::index_select(pos, 0, ibot_masked));
            std::vector<int64_t> perm(ibot_visible.begin(), ibot_visible.end());
            perm.insert(perm.end(), ibot_masked.begin(), ibot_masked.end());
            std::vector<int64_t> inv(static_cast<size_t>(n_glob));
            for (int64_t i = 0; i < n_glob; ++i) inv[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
            Tensor replaced = op::index_select(op::concat({vis, mtok}, 1), 1, inv);
            Tensor full = op::concat({replaced, rest}, 0);
            r = run_blocks(state.student, with_cls(state.student, full));
            Tensor masked_rows = op::index_select(op::slice(r.patches, 0, 0, half), 1, ibot_masked);
            Tensor flat = op::reshape(masked_rows, {half * m, d});
            student_patch_logp = op::log_softmax(op::scale(state.head_s.forward(flat), 1.0 / cfg.student_temp));
        } else {
            r = vit_forward(state.student, crop);
        }
        Tensor scores = state.head_s.forward(r.cls);
        student_logp.push_back(op::log_softmax(op::scale(scores, 1.0 / cfg.student_temp)));
        if (global) student_cls.push_back(r.cls);
    }

    // ---- dino term: all teacher-global x student-view pairs except same view ----
    Tensor dino_total;
    int64_t n_pairs = 0;
    for (size_t g = 0; g < teacher_probs.size(); ++g)
        for (size_t v = 0; v < student_logp.size(); ++v) {
            if (v == g) continue;  // same-view pair excluded
            Tensor ce = dino_ce(teacher_probs[g], student_logp[v]);
            dino_total = dino_total.defined() ? op::add(dino_total, ce) : ce;
            ++n_pairs;
        }
    Tensor loss = op::scale(dino_total, 1.0 / static_cast<double>(n_pairs));
    parts.dino = loss.item();

    // ---- ibot term ----
    if (do_ibot && student_patch_logp.defined()) {
        Tensor ibot = dino_ce(teacher_patch_probs, student_patch_logp);
        parts.ibot = ibot.item();
        loss = op::add(loss, ibot);
    }

    // ---- koleo on student cls features of the global crops ----
    if (cfg.koleo_weight > 0) {
        Tensor kl;
        for (const Tensor& cls : student_cls) {
            Tensor k = koleo(cls);
            kl = kl.defined() ? op::add(kl, k) : k;
        }
        kl = op::scale(kl, 1.0 / static_cast<double>(student_cls.size()));
        parts.koleo = kl.item();
        loss = op::add(loss, op::scale(kl, cfg.koleo_weight));
    }

    parts.total = loss.item();
    if (!std::isfinite(parts.total))
        throw NumericError("dino_step: non-finite loss (dino=" + std::to_string(parts.dino) +
                           ", ibot=" + std::to_string(parts.ibot) +
                           ", koleo=" + std::to_string(parts.koleo) + ")");
    Tensor scaled = loss_scale == 1.0 ? loss : op::scale(loss, loss_scale);
    tape.backward(scaled);
    return parts;
}

} // namespace explora
