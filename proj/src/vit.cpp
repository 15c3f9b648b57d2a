#include "explora/vit.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace explora {

namespace op = ops;

LoRAAdapter LoRAAdapter::init(int64_t in_dim, int64_t out_dim, int64_t rank, double alpha, Rng& rng,
                              DType dt) {
    if (rank <= 0) throw ContractError("LoRAAdapter: rank must be positive");
    if (rank > std::min(in_dim, out_dim))
        throw ContractError("LoRAAdapter: rank " + std::to_string(rank) + " exceeds min(" +
                            std::to_string(in_dim) + ", " + std::to_string(out_dim) + ")");
    LoRAAdapter ad;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.a = Tensor::randn({in_dim, rank}, rng, 1.0 / std::sqrt(static_cast<double>(rank)), dt);
    ad.b = Tensor::zeros({rank, out_dim}, dt);
    ad.a.set_requires_grad(true);
    ad.b.set_requires_grad(true);
    return ad;
}

void ViTConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || in_channels <= 0 || depth <= 0 || dim <= 0 || heads <= 0)
        throw ContractError("ViTConfig: all sizes must be positive");
    if (image_size % patch_size != 0)
        throw ContractError("ViTConfig: image_size " + std::to_string(image_size) +
                            " not divisible by patch_size " + std::to_string(patch_size));
    if (dim % heads != 0)
        throw ContractError("ViTConfig: dim " + std::to_string(dim) + " not divisible by heads " +
                            std::to_string(heads));
    if (mlp_dim() <= 0) throw ContractError("ViTConfig: mlp dim must be positive");
    if (!channel_groups.empty()) {
        std::set<int64_t> seen;
        for (const auto& g : channel_groups) {
            if (g.empty()) throw ContractError("ViTConfig: empty channel group");
            for (int64_t c : g) {
                if (c < 0 || c >= in_channels)
                    throw ContractError("ViTConfig: channel index " + std::to_string(c) + " out of range");
                if (!seen.insert(c).second)
                    throw ContractError("ViTConfig: channel " + std::to_string(c) + " in two groups");
            }
        }
        if (static_cast<int64_t>(seen.size()) != in_channels)
            throw ContractError("ViTConfig: channel_groups must partition all channels");
    }
}

std::vector<std::vector<int64_t>> ViTConfig::groups() const {
    if (!channel_groups.empty()) return channel_groups;
    std::vector<int64_t> all(static_cast<size_t>(in_channels));
    for (int64_t c = 0; c < in_channels; ++c) all[static_cast<size_t>(c)] = c;
    return {all};
}

ViTConfig ViTConfig::vit_large() {
    ViTConfig c;
    c.image_size = 224;
    c.patch_size = 16;
    c.in_channels = 3;
    c.depth = 24;
    c.dim = 1024;
    c.heads = 16;
    c.mlp_ratio = 4.0;
    return c;
}

ViTConfig ViTConfig::vit_base() {
    ViTConfig c = vit_large();
    c.depth = 12;
    c.dim = 768;
    c.heads = 12;
    return c;
}

ViTConfig ViTConfig::desk() {
    ViTConfig c;
    c.image_size = 32;
    c.patch_size = 8;
    c.in_channels = 3;
    c.depth = 6;
    c.dim = 64;
    c.heads = 4;
    c.mlp_ratio = 4.0;
    return c;
}

Linear Linear::init(int64_t in, int64_t out, Rng& rng, DType dt, double stddev) {
    Linear l;
    l.weight = Tensor::randn({in, out}, rng, stddev, dt);
    l.bias = Tensor::zeros({out}, dt);
    l.weight.set_requires_grad(true);
    l.bias.set_requires_grad(true);
    return l;
}

Tensor Linear::forward(const Tensor& x) const {
    const int64_t in = x.dim(-1);
    if (in != in_dim())
        throw ShapeError("Linear: input width " + std::to_string(in) + " does not match weight " +
                         shape_str(weight.shape()));
    const bool flat = x.rank() == 2;
    Tensor rows = flat ? x : op::reshape(x, {x.numel() / in, in});
    Tensor y = op::matmul(rows, weight);
    if (adapter.has_value() && adapter->rank > 0) {
        Tensor low = op::matmul(op::matmul(rows, adapter->a), adapter->b);
        y = op::add(y, op::scale(low, adapter->scaling()));
    }
    y = op::add(y, bias);
    if (flat) return y;
    Shape out_shape = x.shape();
    out_shape.back() = out_dim();
    return op::reshape(y, out_shape);
}

LayerNormLayer LayerNormLayer::init(int64_t dim, DType dt) {
    LayerNormLayer ln;
    ln.gamma = Tensor::full({dim}, 1.0, dt);
    ln.beta = Tensor::zeros({dim}, dt);
    ln.gamma.set_requires_grad(true);
    ln.beta.set_requires_grad(true);
    return ln;
}

Block Block::init(int64_t dim, int64_t mlp_dim, Rng& rng, DType dt) {
    Block b;
    b.ln1 = LayerNormLayer::init(dim, dt);
    b.ln2 = LayerNormLayer::init(dim, dt);
    b.wq = Linear::init(dim, dim, rng, dt);
    b.wk = Linear::init(dim, dim, rng, dt);
    b.wv = Linear::init(dim, dim, rng, dt);
    b.wo = Linear::init(dim, dim, rng, dt);
    b.w1 = Linear::init(dim, mlp_dim, rng, dt);
    b.w2 = Linear::init(mlp_dim, dim, rng, dt);
    return b;
}

ViTModel ViTModel::init(const ViTConfig& cfg, Rng& rng) {
    cfg.validate();
    ViTModel m;
    m.config = cfg;
    const auto groups = cfg.groups();
    for (const auto& g : groups) {
        const int64_t patch_dim = static_cast<int64_t>(g.size()) * cfg.patch_size * cfg.patch_size;
        m.patch_embeds.push_back(Linear::init(patch_dim, cfg.dim, rng, cfg.dtype));
        Tensor pos = Tensor::randn({cfg.patches_per_group(), cfg.dim}, rng, 0.02, cfg.dtype);
        pos.set_requires_grad(true);
        m.pos_embeds.push_back(pos);
    }
    m.cls_token = Tensor::randn({cfg.dim}, rng, 0.02, cfg.dtype);
    m.cls_token.set_requires_grad(true);
    for (int64_t i = 0; i < cfg.depth; ++i)
        m.blocks.push_back(Block::init(cfg.dim, cfg.mlp_dim(), rng, cfg.dtype));
    return m;
}

namespace {

void push_linear(std::vector<NamedParam>& out, const std::string& prefix, const Linear& l) {
    out.push_back({prefix + ".weight", l.weight});
    out.push_back({prefix + ".bias", l.bias});
    if (l.adapter.has_value()) {
        out.push_back({prefix + ".lora_a", l.adapter->a});
        out.push_back({prefix + ".lora_b", l.adapter->b});
    }
}

} // namespace

std::vector<NamedParam> ViTModel::named_params() const {
    std::vector<NamedParam> out;
    for (size_t g = 0; g < patch_embeds.size(); ++g)
        push_linear(out, "patch_embed." + std::to_string(g), patch_embeds[g]);
    for (size_t g = 0; g < pos_embeds.size(); ++g)
        out.push_back({"pos_embed." + std::to_string(g), pos_embeds[g]});
    out.push_back({"cls_token", cls_token});
    for (size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "blocks." + std::to_string(i);
        const Block& b = blocks[i];
        out.push_back({p + ".ln1.gamma", b.ln1.gamma});
        out.push_back({p + ".ln1.beta", b.ln1.beta});
        push_linear(out, p + ".attn.wq", b.wq);
        push_linear(out, p + ".attn.wk", b.wk);
        push_linear(out, p + ".attn.wv", b.wv);
        push_linear(out, p + ".attn.wo", b.wo);
        out.push_back({p + ".ln2.gamma", b.ln2.gamma});
        out.push_back({p + ".ln2.beta", b.ln2.beta});
        push_linear(out, p + ".mlp.w1", b.w1);
        push_linear(out, p + ".mlp.w2", b.w2);
    }
    return out;
}

namespace {

Linear clone_linear(const Linear& l) {
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

} // namespace

ViTModel ViTModel::clone() const {
    ViTModel m;
    m.config = config;
    for (const Linear& pe : patch_embeds) m.patch_embeds.push_back(clone_linear(pe));
    for (const Tensor& pe : pos_embeds) m.pos_embeds.push_back(pe.clone());
    m.cls_token = cls_token.clone();
    for (const Block& b : blocks) {
        Block c;
        c.ln1.gamma = b.ln1.gamma.clone();
        c.ln1.beta = b.ln1.beta.clone();
        c.ln2.gamma = b.ln2.gamma.clone();
        c.ln2.beta = b.ln2.beta.clone();
        c.wq = clone_linear(b.wq);
        c.wk = clone_linear(b.wk);
        c.wv = clone_linear(b.wv);
        c.wo = clone_linear(b.wo);
        c.w1 = clone_linear(b.w1);
        c.w2 = clone_linear(b.w2);
        m.blocks.push_back(std::move(c));
    }
    return m;
}

void ViTModel::set_all_requires_grad(bool v) {
    for (NamedParam& np : named_params()) np.tensor.set_requires_grad(v);
}

bool ViTModel::has_adapters() const {
    for (const Block& b : blocks)
        for (const Linear* l : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2})
            if (l->adapter.has_value()) return true;
    return false;
}

std::vector<Tensor> patchify(const Tensor& images, const ViTConfig& cfg) {
    Tensor imgs = images;
    if (imgs.rank() == 3) {
        NoGrad ng;
        imgs = op::reshape(imgs, {1, imgs.dim(0), imgs.dim(1), imgs.dim(2)});
    }
    if (imgs.rank() != 4) throw ShapeError("patchify: expected [C,H,W] or [B,C,H,W]");
    const int64_t B = imgs.dim(0), C = imgs.dim(1), H = imgs.dim(2), W = imgs.dim(3);
    if (C != cfg.in_channels)
        throw ShapeError("patchify: image has " + std::to_string(C) + " channels, config expects " +
                         std::to_string(cfg.in_channels));
    const int64_t p = cfg.patch_size;
    if (H % p != 0 || W % p != 0)
        throw ShapeError("patchify: image " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by patch size " + std::to_string(p));
    const int64_t gh = H / p, gw = W / p, n = gh * gw;
    std::vector<Tensor> out;
    for (const auto& group : cfg.groups()) {
        const int64_t gc = static_cast<int64_t>(group.size());
        Tensor t = make_tensor({B, n, gc * p * p}, imgs.dtype());
        for (int64_t b = 0; b < B; ++b)
            for (int64_t py = 0; py < gh; ++py)
                for (int64_t px = 0; px < gw; ++px) {
                    const int64_t patch = py * gw + px;
                    int64_t off = 0;
                    for (int64_t ci = 0; ci < gc; ++ci) {
                        const int64_t c = group[static_cast<size_t>(ci)];
                        for (int64_t dy = 0; dy < p; ++dy)
                            for (int64_t dx = 0; dx < p; ++dx) {
                                const int64_t src = ((b * C + c) * H + py * p + dy) * W + px * p + dx;
                                const int64_t dst = (b * n + patch) * gc * p * p + off++;
                                t.set(dst, imgs.at(src));
                            }
                    }
                }
        out.push_back(std::move(t));
    }
    return out;
}

Tensor unpatchify(const std::vector<Tensor>& groups, const ViTConfig& cfg, int64_t image_size) {
    const auto group_defs = cfg.groups();
    if (groups.size() != group_defs.size())
        throw ShapeError("unpatchify: expected " + std::to_string(group_defs.size()) + " groups");
    const int64_t p = cfg.patch_size;
    const int64_t n = groups[0].dim(1);
    const int64_t g = image_size > 0
                          ? image_size / p
                          : static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (g * g != n) throw ShapeError("unpatchify: patch count is not a square grid");
    const int64_t H = g * p, W = g * p;
    const int64_t B = groups[0].dim(0);
    Tensor imgs = Tensor::zeros({B, cfg.in_channels, H, W}, groups[0].dtype());
    for (size_t gi = 0; gi < group_defs.size(); ++gi) {
        const auto& group = group_defs[gi];
        const Tensor& t = groups[gi];
        const int64_t gc = static_cast<int64_t>(group.size());
        if (t.dim(0) != B || t.dim(1) != n || t.dim(2) != gc * p * p)
            throw ShapeError("unpatchify: group tensor shape mismatch");
        for (int64_t b = 0; b < B; ++b)
            for (int64_t py = 0; py < g; ++py)
                for (int64_t px = 0; px < g; ++px) {
                    const int64_t patch = py * g + px;
                    int64_t off = 0;
                    for (int64_t ci = 0; ci < gc; ++ci) {
                        const int64_t c = group[static_cast<size_t>(ci)];
                        for (int64_t dy = 0; dy < p; ++dy)
                            for (int64_t dx = 0; dx < p; ++dx) {
                                const int64_t dst =
                                    ((b * cfg.in_channels + c) * H + py * p + dy) * W + px * p + dx;
                                imgs.set(dst, t.at((b * n + patch) * gc * p * p + off++));
                            }
                    }
                }
    }
    return imgs;
}

Tensor pos_interp_matrix(int64_t grid_old, int64_t grid_new, DType dt) {
    Tensor m = Tensor::zeros({grid_new * grid_new, grid_old * grid_old}, dt);
    for (int64_t ny = 0; ny < grid_new; ++ny)
        for (int64_t nx = 0; nx < grid_new; ++nx) {
            // align-corners mapping of the new grid onto the old one
            const double sy =
                grid_new > 1 ? static_cast<double>(ny) * static_cast<double>(grid_old - 1) /
                                   static_cast<double>(grid_new - 1)
                             : 0.5 * static_cast<double>(grid_old - 1);
            const double sx =
                grid_new > 1 ? static_cast<double>(nx) * static_cast<double>(grid_old - 1) /
                                   static_cast<double>(grid_new - 1)
                             : 0.5 * static_cast<double>(grid_old - 1);
            const int64_t y0 = static_cast<int64_t>(std::floor(sy));
            const int64_t x0 = static_cast<int64_t>(std::floor(sx));
            const int64_t y1 = std::min(y0 + 1, grid_old - 1);
            const int64_t x1 = std::min(x0 + 1, grid_old - 1);
            const double wy = sy - static_cast<double>(y0);
            const double wx = sx - static_cast<double>(x0);
            const int64_t row = ny * grid_new + nx;
            auto put = [&](int64_t y, int64_t x, double w) {
                if (w == 0.0) return;
                const int64_t idx = row * grid_old * grid_old + y * grid_old + x;
                m.set(idx, m.at(idx) + w);
            };
            put(y0, x0, (1 - wy) * (1 - wx));
            put(y0, x1, (1 - wy) * wx);
            put(y1, x0, wy * (1 - wx));
            put(y1, x1, wy * wx);
        }
    return m;
}

Tensor patch_tokens(const ViTModel& model, const Tensor& images) {
    const ViTConfig& cfg = model.config;
    auto groups = patchify(images, cfg);
    const int64_t img = images.rank() == 4 ? images.dim(2) : images.dim(1);
    const int64_t grid_new = img / cfg.patch_size;
    std::vector<Tensor> embedded;
    for (size_t g = 0; g < groups.size(); ++g) {
        Tensor tok = model.patch_embeds[g].forward(groups[g]);  // [B, n, d]
        Tensor pos = model.pos_embeds[g];
        if (grid_new != cfg.grid_size()) {
            Tensor m = pos_interp_matrix(cfg.grid_size(), grid_new, pos.dtype());
            pos = op::matmul(m, pos);
        }
        embedded.push_back(op::add(tok, pos));
    }
    return embedded.size() == 1 ? embedded[0] : op::concat(embedded, 1);
}

Tensor with_cls(const ViTModel& model, const Tensor& tokens) {
    const int64_t B = tokens.dim(0);
    Tensor cls = op::reshape(op::expand_leading(model.cls_token, B), {B, 1, tokens.dim(2)});
    return op::concat({cls, tokens}, 1);
}

namespace {

Tensor drop_path_mask(int64_t batch, double p, Rng& rng, DType dt) {
    Tensor mask = Tensor::zeros({batch, 1, 1}, dt);
    const double keep = 1.0 - p;
    for (int64_t b = 0; b < batch; ++b) mask.set(b, rng.uniform() < keep ? 1.0 / keep : 0.0);
    return mask;
}

Tensor block_forward(const Block& blk, const Tensor& x, int64_t heads, const ForwardOptions& opts,
                     Tensor* attn_out) {
    const int64_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    const int64_t dh = d / heads;
    Tensor h = blk.ln1.forward(x);
    auto split_heads = [&](const Tensor& t) {
        return op::reshape(op::permute(op::reshape(t, {B, T, heads, dh}), {0, 2, 1, 3}),
                           {B * heads, T, dh});
    };
    Tensor q = split_heads(blk.wq.forward(h));
    Tensor k = split_heads(blk.wk.forward(h));
    Tensor v = split_heads(blk.wv.forward(h));
    Tensor scores = op::scale(op::bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = op::softmax(scores);
    if (attn_out) {
        NoGrad ng;
        Tensor snap = attn.clone();
        snap.set_requires_grad(false);
        *attn_out = op::reshape(snap, {B, heads, T, T});
    }
    Tensor ctx = op::bmm(attn, v);  // [B*H, T, dh]
    ctx = op::reshape(op::permute(op::reshape(ctx, {B, heads, T, dh}), {0, 2, 1, 3}), {B, T, d});
    Tensor branch = blk.wo.forward(ctx);
    if (opts.drop_path > 0.0)
        branch = op::mul(branch, drop_path_mask(B, opts.drop_path, *opts.rng, x.dtype()));
    Tensor y = op::add(x, branch);

    Tensor m = blk.w2.forward(op::gelu(blk.w1.forward(blk.ln2.forward(y))));
    if (opts.drop_path > 0.0) m = op::mul(m, drop_path_mask(B, opts.drop_path, *opts.rng, x.dtype()));
    return op::add(y, m);
}

} // namespace

Tensor run_block_stack(const std::vector<Block>& blocks, Tensor tokens, int64_t heads) {
    ForwardOptions opts;
    Tensor x = std::move(tokens);
    for (size_t i = 0; i < blocks.size(); ++i) {
        try {
            x = block_forward(blocks[i], x, heads, opts, nullptr);
        } catch (const NumericError& e) {
            throw NumericError("block stack: block " + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return x;
}

ForwardResult run_blocks(const ViTModel& model, Tensor tokens, const ForwardOptions& opts) {
    if (opts.drop_path > 0.0 && opts.rng == nullptr)
        throw ContractError("run_blocks: drop_path requires an rng");
    if (opts.attn_block < 0 || opts.attn_block > model.config.depth)
        throw ContractError("run_blocks: attn_block out of range");
    ForwardResult res;
    const int64_t N = tokens.dim(1) - 1;
    Tensor x = tokens;
    for (size_t i = 0; i < model.blocks.size(); ++i) {
        Tensor* attn_dst = (static_cast<int64_t>(i) + 1 == opts.attn_block) ? &res.attention : nullptr;
        try {
            x = block_forward(model.blocks[i], x, model.config.heads, opts, attn_dst);
        } catch (const NumericError& e) {
            throw NumericError("vit forward: block " + std::to_string(i + 1) + ": " + e.what());
        }
        if (!x.all_finite())
            throw NumericError("vit forward: non-finite activation after block " + std::to_string(i + 1));
        if (opts.collect == Collect::all_blocks) {
            res.all_cls.push_back(op::reshape(op::slice(x, 1, 0, 1), {x.dim(0), x.dim(2)}));
            res.all_patches.push_back(op::slice(x, 1, 1, N));
        }
    }
    res.cls = op::reshape(op::slice(x, 1, 0, 1), {x.dim(0), x.dim(2)});
    res.patches = op::slice(x, 1, 1, N);
    return res;
}

ForwardResult vit_forward(const ViTModel& model, const Tensor& images, const ForwardOptions& opts) {
    Tensor tokens = with_cls(model, patch_tokens(model, images));
    return run_blocks(model, tokens, opts);
}

Tensor attention_summary(const Tensor& scores, double sigma_clip) {
    if (sigma_clip <= 0) throw ContractError("attention_summary: sigma_clip must be positive");
    if (!scores.all_finite()) throw NumericError("attention_summary: non-finite scores");
    const int64_t n = scores.numel();
    if (n == 0) throw ShapeError("attention_summary: empty score map");
    double mu = 0;
    for (int64_t i = 0; i < n; ++i) mu += scores.at(i);
    mu /= static_cast<double>(n);
    double var = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double c = scores.at(i) - mu;
        var += c * c;
    }
    var /= static_cast<double>(n);
    const double sd = std::sqrt(var);
    Tensor out = scores.clone();
    out.set_requires_grad(false);
    if (sd == 0.0) return out;  // degenerate map: no-op
    const double lo = mu - sigma_clip * sd, hi = mu + sigma_clip * sd;
    double mn = hi, mx = lo;
    for (int64_t i = 0; i < n; ++i) {
        const double v = std::clamp(scores.at(i), lo, hi);
        out.set(i, v);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    if (mx == mn) return out;
    for (int64_t i = 0; i < n; ++i) out.set(i, (out.at(i) - mn) / (mx - mn));
    return out;
}

} // namespace explora
