#pragma once

#include <map>
#include <set>
#include <string>

#include "explora/vit.hpp"

namespace explora {

// matrices LoRA can attach to; mlp covers both MLP projections
enum class Target { q, k, v, o, mlp };

std::string target_name(Target t);
Target target_from_name(const std::string& name);
// compact spec strings: "qv", "qkvo", "mlp", "all", or comma lists like "q,v,mlp"
std::set<Target> targets_from_string(const std::string& s);
std::string targets_to_string(const std::set<Target>& ts);

// The trainable-parameter partition: full-rank updates for blocks in
// unfrozen_blocks, rank-r adapters on the target matrices elsewhere, layer
// norms per flag, plus named non-block parameters (patch_embed, pos_embed,
// cls_token) for the multi-spectral case.
struct Partition {
    std::set<int64_t> unfrozen_blocks;  // 1-indexed block ids
    int64_t rank = 0;                   // 0 means no adapters
    double alpha = -1.0;                // < 0 selects alpha = rank (scale 1)
    std::set<Target> targets{Target::q, Target::v};
    bool norms_unfrozen = true;
    std::set<std::string> extra_trainable;

    double effective_alpha() const { return alpha < 0 ? static_cast<double>(rank) : alpha; }
    void validate(const ViTConfig& cfg) const;
    bool operator==(const Partition&) const = default;

    // everything trainable (from-scratch pre-training)
    static Partition full(int64_t depth);
    bool is_full(int64_t depth) const;
};

struct ParamCountReport {
    int64_t trainable = 0;
    int64_t frozen = 0;
    std::map<std::string, int64_t> by_category;  // trainable scalars per category
};

// Closed-form count from the config; no model instantiation, so ViT-L sized
// configs are free to query.
ParamCountReport param_count(const ViTConfig& cfg, const Partition& part);
inline ParamCountReport param_count(const ViTModel& model, const Partition& part) {
    return param_count(model.config, part);
}

// Attaches adapters and sets requires_grad flags to realize the partition.
void inject(ViTModel& model, const Partition& part, Rng& rng);

// Adapter machinery shared with the MAE decoder: rank-r adapters on the
// target matrices of every block not in unfrozen (1-indexed), norms per flag.
void inject_block_stack(std::vector<Block>& blocks, const std::set<int64_t>& unfrozen, int64_t rank,
                        double alpha, const std::set<Target>& targets, bool norms_unfrozen, Rng& rng);

// Folds every adapter into its host weight (W += scaling * A B) and removes it.
void merge_inplace(ViTModel& model);
// Copy with adapters folded; returned model is plain and fully frozen.
ViTModel merged(const ViTModel& model);

struct DeltaWeights {
    Partition partition;
    std::vector<NamedParam> tensors;  // canonical named_params order, cloned data

    int64_t scalar_count() const;
    const Tensor* find(const std::string& name) const;
};

enum class ApplyMode { attach, merge };

// Exactly the trainable set under the partition, cloned out of the model.
DeltaWeights extract_delta(const ViTModel& model, const Partition& part);

// base + delta. attach keeps adapters live and trainable; merge folds them and
// returns a frozen plain model.
ViTModel apply_delta(const ViTModel& base, const DeltaWeights& delta, ApplyMode mode);

std::vector<NamedParam> trainable_params(const ViTModel& model);
int64_t total_scalars(const std::vector<NamedParam>& params);

// canonical parameter names the partition marks trainable, for exactness checks
std::set<std::string> partition_trainable_names(const ViTConfig& cfg, const Partition& part);

} // namespace explora
