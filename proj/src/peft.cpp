#include "explora/peft.hpp"

#include <algorithm>
#include <cstring>
#include <functional>

namespace explora {

namespace op = ops;

std::string target_name(Target t) {
    switch (t) {
        case Target::q: return "q";
        case Target::k: return "k";
        case Target::v: return "v";
        case Target::o: return "o";
        case Target::mlp: return "mlp";
    }
    return "?";
}

Target target_from_name(const std::string& name) {
    if (name == "q") return Target::q;
    if (name == "k") return Target::k;
    if (name == "v") return Target::v;
    if (name == "o") return Target::o;
    if (name == "mlp") return Target::mlp;
    throw ContractError("unknown LoRA target: " + name);
}

std::set<Target> targets_from_string(const std::string& s) {
    if (s == "all") return {Target::q, Target::k, Target::v, Target::o, Target::mlp};
    std::set<Target> out;
    if (s.find(',') != std::string::npos || s == "mlp") {
        // comma list of names
        size_t pos = 0;
        std::string rest = s;
        while (!rest.empty()) {
            pos = rest.find(',');
            const std::string tok = rest.substr(0, pos);
            if (!tok.empty()) out.insert(target_from_name(tok));
            if (pos == std::string::npos) break;
            rest = rest.substr(pos + 1);
        }
        return out;
    }
    // compact letter form, e.g. "qv", "qkvo"
    for (char c : s) out.insert(target_from_name(std::string(1, c)));
    if (out.empty()) throw ContractError("empty LoRA target spec");
    return out;
}

std::string targets_to_string(const std::set<Target>& ts) {
    std::string out;
    for (Target t : ts) {
        if (!out.empty()) out += ',';
        out += target_name(t);
    }
    return out;
}

void Partition::validate(const ViTConfig& cfg) const {
    if (rank < 0) throw ContractError("Partition: rank must be >= 0");
    for (int64_t u : unfrozen_blocks)
        if (u < 1 || u > cfg.depth)
            throw ContractError("Partition: block " + std::to_string(u) + " outside {1.." +
                                std::to_string(cfg.depth) + "}");
    if (rank > 0) {
        for (Target t : targets) {
            const int64_t min_dim = t == Target::mlp ? std::min(cfg.dim, cfg.mlp_dim()) : cfg.dim;
            if (rank > min_dim)
                throw ContractError("Partition: rank " + std::to_string(rank) + " exceeds min dim " +
                                    std::to_string(min_dim) + " of target " + target_name(t));
        }
    }
    for (const std::string& e : extra_trainable)
        if (e != "patch_embed" && e != "pos_embed" && e != "cls_token")
            throw ContractError("Partition: unknown extra_trainable entry '" + e + "'");
}

Partition Partition::full(int64_t depth) {
    Partition p;
    for (int64_t i = 1; i <= depth; ++i) p.unfrozen_blocks.insert(i);
    p.rank = 0;
    p.targets.clear();
    p.norms_unfrozen = true;
    p.extra_trainable = {"patch_embed", "pos_embed", "cls_token"};
    return p;
}

bool Partition::is_full(int64_t depth) const {
    return static_cast<int64_t>(unfrozen_blocks.size()) == depth && extra_trainable.size() == 3;
}

namespace {

int64_t linear_params(int64_t in, int64_t out) { return in * out + out; }

} // namespace

ParamCountReport param_count(const ViTConfig& cfg, const Partition& part) {
    cfg.validate();
    part.validate(cfg);
    const int64_t d = cfg.dim, m = cfg.mlp_dim(), L = cfg.depth;
    const int64_t block = 4 * linear_params(d, d) + linear_params(d, m) + linear_params(m, d) + 4 * d;

    int64_t patch = 0, pos = 0;
    for (const auto& g : cfg.groups()) {
        patch += linear_params(static_cast<int64_t>(g.size()) * cfg.patch_size * cfg.patch_size, d);
        pos += cfg.patches_per_group() * d;
    }
    const int64_t total = L * block + patch + pos + d;

    ParamCountReport r;
    const int64_t u = static_cast<int64_t>(part.unfrozen_blocks.size());
    r.by_category["unfrozen_blocks"] = u * block;

    int64_t lora_per_block = 0;
    if (part.rank > 0) {
        for (Target t : part.targets) {
            if (t == Target::mlp)
                lora_per_block += part.rank * (d + m) * 2;
            else
                lora_per_block += part.rank * 2 * d;
        }
    }
    r.by_category["lora"] = (L - u) * lora_per_block;
    r.by_category["layer_norms"] = part.norms_unfrozen ? (L - u) * 4 * d : 0;
    r.by_category["patch_embed"] = part.extra_trainable.count("patch_embed") ? patch : 0;
    r.by_category["pos_embed"] = part.extra_trainable.count("pos_embed") ? pos : 0;
    r.by_category["cls_token"] = part.extra_trainable.count("cls_token") ? d : 0;

    for (const auto& [k, v] : r.by_category) r.trainable += v;
    r.frozen = total + r.by_category["lora"] - r.trainable;
    return r;
}

namespace {

Linear* block_target_linear(Block& b, Target t, int which) {
    switch (t) {
        case Target::q: return which == 0 ? &b.wq : nullptr;
        case Target::k: return which == 0 ? &b.wk : nullptr;
        case Target::v: return which == 0 ? &b.wv : nullptr;
        case Target::o: return which == 0 ? &b.wo : nullptr;
        case Target::mlp: return which == 0 ? &b.w1 : (which == 1 ? &b.w2 : nullptr);
    }
    return nullptr;
}

void for_each_target(Block& b, const std::set<Target>& targets,
                     const std::function<void(Linear&)>& fn) {
    for (Target t : targets)
        for (int which = 0;; ++which) {
            Linear* l = block_target_linear(b, t, which);
            if (!l) break;
            fn(*l);
        }
}

void set_block_requires_grad(Block& b, bool v) {
    for (Tensor t : {b.ln1.gamma, b.ln1.beta, b.ln2.gamma, b.ln2.beta, b.wq.weight, b.wq.bias,
                     b.wk.weight, b.wk.bias, b.wv.weight, b.wv.bias, b.wo.weight, b.wo.bias,
                     b.w1.weight, b.w1.bias, b.w2.weight, b.w2.bias})
        t.set_requires_grad(v);
}

} // namespace

void inject_block_stack(std::vector<Block>& blocks, const std::set<int64_t>& unfrozen, int64_t rank,
                        double alpha, const std::set<Target>& targets, bool norms_unfrozen, Rng& rng) {
    for (size_t i = 0; i < blocks.size(); ++i) {
        Block& b = blocks[i];
        const bool in_u = unfrozen.count(static_cast<int64_t>(i) + 1) > 0;
        set_block_requires_grad(b, in_u);
        if (in_u) continue;
        if (norms_unfrozen) {
            b.ln1.gamma.set_requires_grad(true);
            b.ln1.beta.set_requires_grad(true);
            b.ln2.gamma.set_requires_grad(true);
            b.ln2.beta.set_requires_grad(true);
        }
        if (rank > 0) {
            for_each_target(b, targets, [&](Linear& l) {
                if (l.adapter.has_value()) throw StateError("inject: adapter already present");
                l.adapter = LoRAAdapter::init(l.in_dim(), l.out_dim(), rank, alpha, rng, l.weight.dtype());
            });
        }
    }
}

void inject(ViTModel& model, const Partition& part, Rng& rng) {
    part.validate(model.config);
    if (model.has_adapters()) throw StateError("inject: model already has adapters");
    // freeze everything, then re-enable per partition
    model.set_all_requires_grad(false);
    inject_block_stack(model.blocks, part.unfrozen_blocks, part.rank, part.effective_alpha(),
                       part.targets, part.norms_unfrozen, rng);
    if (part.extra_trainable.count("patch_embed"))
        for (Linear& pe : model.patch_embeds) {
            pe.weight.set_requires_grad(true);
            pe.bias.set_requires_grad(true);
        }
    if (part.extra_trainable.count("pos_embed"))
        for (Tensor& pe : model.pos_embeds) pe.set_requires_grad(true);
    if (part.extra_trainable.count("cls_token")) model.cls_token.set_requires_grad(true);
}

namespace {

void merge_linear(Linear& l) {
    if (!l.adapter.has_value()) return;
    if (l.adapter->rank > 0) {
        NoGrad ng;
        Tensor delta = op::scale(op::matmul(l.adapter->a, l.adapter->b), l.adapter->scaling());
        const int64_t n = l.weight.numel();
        if (l.weight.dtype() == DType::f32) {
            auto w = l.weight.data<float>();
            auto dd = delta.data<float>();
            for (int64_t i = 0; i < n; ++i) w[static_cast<size_t>(i)] += dd[static_cast<size_t>(i)];
        } else {
            auto w = l.weight.data<double>();
            auto dd = delta.data<double>();
            for (int64_t i = 0; i < n; ++i) w[static_cast<size_t>(i)] += dd[static_cast<size_t>(i)];
        }
    }
    l.adapter.reset();
}

} // namespace

void merge_inplace(ViTModel& model) {
    for (Block& b : model.blocks)
        for (Linear* l : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2}) merge_linear(*l);
}

ViTModel merged(const ViTModel& model) {
    ViTModel out = model.clone();
    merge_inplace(out);
    out.set_all_requires_grad(false);
    return out;
}

std::set<std::string> partition_trainable_names(const ViTConfig& cfg, const Partition& part) {
    part.validate(cfg);
    std::set<std::string> out;
    auto add_linear = [&out](const std::string& p) {
        out.insert(p + ".weight");
        out.insert(p + ".bias");
    };
    for (int64_t i = 0; i < cfg.depth; ++i) {
        const std::string p = "blocks." + std::to_string(i);
        const bool in_u = part.unfrozen_blocks.count(i + 1) > 0;
        if (in_u) {
            out.insert(p + ".ln1.gamma");
            out.insert(p + ".ln1.beta");
            out.insert(p + ".ln2.gamma");
            out.insert(p + ".ln2.beta");
            add_linear(p + ".attn.wq");
            add_linear(p + ".attn.wk");
            add_linear(p + ".attn.wv");
            add_linear(p + ".attn.wo");
            add_linear(p + ".mlp.w1");
            add_linear(p + ".mlp.w2");
            continue;
        }
        if (part.norms_unfrozen) {
            out.insert(p + ".ln1.gamma");
            out.insert(p + ".ln1.beta");
            out.insert(p + ".ln2.gamma");
            out.insert(p + ".ln2.beta");
        }
        if (part.rank > 0) {
            auto add_lora = [&out, &p](const std::string& lin) {
                out.insert(p + "." + lin + ".lora_a");
                out.insert(p + "." + lin + ".lora_b");
            };
            for (Target t : part.targets) {
                switch (t) {
                    case Target::q: add_lora("attn.wq"); break;
                    case Target::k: add_lora("attn.wk"); break;
                    case Target::v: add_lora("attn.wv"); break;
                    case Target::o: add_lora("attn.wo"); break;
                    case Target::mlp:
                        add_lora("mlp.w1");
                        add_lora("mlp.w2");
                        break;
                }
            }
        }
    }
    if (part.extra_trainable.count("patch_embed"))
        for (int64_t g = 0; g < cfg.num_groups(); ++g) {
            out.insert("patch_embed." + std::to_string(g) + ".weight");
            out.insert("patch_embed." + std::to_string(g) + ".bias");
        }
    if (part.extra_trainable.count("pos_embed"))
        for (int64_t g = 0; g < cfg.num_groups(); ++g) out.insert("pos_embed." + std::to_string(g));
    if (part.extra_trainable.count("cls_token")) out.insert("cls_token");
    return out;
}

std::vector<NamedParam> trainable_params(const ViTModel& model) {
    std::vector<NamedParam> out;
    for (const NamedParam& np : model.named_params())
        if (np.tensor.requires_grad()) out.push_back(np);
    return out;
}

int64_t total_scalars(const std::vector<NamedParam>& params) {
    int64_t n = 0;
    for (const NamedParam& p : params) n += p.tensor.numel();
    return n;
}

int64_t DeltaWeights::scalar_count() const {
    int64_t n = 0;
    for (const NamedParam& p : tensors) n += p.tensor.numel();
    return n;
}

const Tensor* DeltaWeights::find(const std::string& name) const {
    for (const NamedParam& p : tensors)
        if (p.name == name) return &p.tensor;
    return nullptr;
}

DeltaWeights extract_delta(const ViTModel& model, const Partition& part) {
    part.validate(model.config);
    const std::set<std::string> want = partition_trainable_names(model.config, part);
    std::set<std::string> have;
    DeltaWeights delta;
    delta.partition = part;
    for (const NamedParam& np : model.named_params()) {
        if (!want.count(np.name)) continue;
        Tensor t = np.tensor.clone();
        t.set_requires_grad(false);
        delta.tensors.push_back({np.name, t});
        have.insert(np.name);
    }
    if (have != want) {
        for (const std::string& w : want)
            if (!have.count(w))
                throw StateError("extract_delta: model lacks parameter '" + w +
                                 "' required by the partition (was it injected with this partition?)");
    }
    return delta;
}

ViTModel apply_delta(const ViTModel& base, const DeltaWeights& delta, ApplyMode mode) {
    if (base.has_adapters()) throw StateError("apply_delta: base model already has adapters");
    try {
        delta.partition.validate(base.config);
    } catch (const Error& e) {
        throw CompatError(std::string("apply_delta: partition incompatible with base: ") + e.what());
    }
    ViTModel out = base.clone();
    Rng scratch(0);  // adapter init values are overwritten below
    inject(out, delta.partition, scratch);
    std::map<std::string, Tensor> by_name;
    for (const NamedParam& np : out.named_params()) by_name.emplace(np.name, np.tensor);
    for (const NamedParam& dp : delta.tensors) {
        auto it = by_name.find(dp.name);
        if (it == by_name.end())
            throw CompatError("apply_delta: base model has no parameter '" + dp.name + "'");
        Tensor dst = it->second;
        if (dst.shape() != dp.tensor.shape() || dst.dtype() != dp.tensor.dtype())
            throw CompatError("apply_delta: shape/dtype mismatch for '" + dp.name + "' (base " +
                              shape_str(dst.shape()) + ", delta " + shape_str(dp.tensor.shape()) + ")");
        std::memcpy(dst.bytes().data(), dp.tensor.bytes().data(), dst.bytes().size());
    }
    if (mode == ApplyMode::merge) {
        merge_inplace(out);
        out.set_all_requires_grad(false);
    }
    return out;
}

} // namespace explora
