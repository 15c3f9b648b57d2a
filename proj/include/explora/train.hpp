#pragma once

#include <functional>
#include <optional>
#include <string>

#include "explora/analysis.hpp"
#include "explora/archive.hpp"
#include "explora/data.hpp"
#include "explora/objectives.hpp"
#include "explora/optim.hpp"
#include "explora/peft.hpp"

namespace explora {

enum class Objective { mae, dino, supervised };

Objective objective_from_name(const std::string& name);
std::string objective_name(Objective o);

struct RunConfig {
    Objective objective = Objective::mae;
    Partition partition;
    int64_t batch_size = 8;
    int64_t accum_steps = 1;
    int64_t iterations = 300;
    int64_t log_every = 50;
    uint64_t seed = 0;
    double base_lr = 2e-3;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // 0 disables (the CLI turns on 3.0 for dino)
    int64_t warmup_iters = 10;
    MAEConfig mae;
    DinoConfig dino;

    void validate(const ViTConfig& cfg) const;
};

struct TrainLogEntry {
    int64_t iter = 0;
    double loss = 0;
    double lr = 0;
    double grad_norm = 0;
    std::map<std::string, double> components;
};
using LogSink = std::function<void(const TrainLogEntry&)>;

struct PretrainOptions {
    const MAEDecoder* init_decoder = nullptr;  // reuse a previously trained decoder
    std::string state_in;                      // resume from a training-state archive
    std::string state_out;                     // write the final training state here
    int64_t halt_at = -1;  // pause after this iteration (schedules still span run.iterations)
    LogSink log;
};

struct PretrainResult {
    DeltaWeights delta;
    ViTModel model;  // trained encoder/student, adapters still attached
    std::optional<MAEDecoder> decoder;
    double initial_loss = 0;
    double final_loss = 0;
    uint64_t base_hash = 0;
};

// Algorithm: inject the partition, loop {accumulate, clip, adamw, schedule,
// ema for dino}, then extract the delta. Aborts after three consecutive
// non-finite losses.
PretrainResult pretrain(const ViTModel& base, const Dataset& unlabeled, const RunConfig& run,
                        const PretrainOptions& opts = {});

// ---- delta checkpoints (EXPL0001 container, kind "delta") ----
void save_delta(const std::string& path, const DeltaWeights& delta, const ViTConfig& cfg,
                uint64_t base_hash, int64_t iteration, const std::string& rng_state);

struct LoadedDelta {
    DeltaWeights delta;
    ViTConfig config;
    uint64_t base_hash = 0;
    int64_t iteration = 0;
    std::string rng_state;
};
LoadedDelta load_delta(const std::string& path);

// verifies the delta's recorded base hash against the base model, then folds
ViTModel merge_delta_onto(const ViTModel& base, const LoadedDelta& delta);

// ---- supervised fine-tuning / probing ----
enum class FinetuneMode { lora, linear_probe, full };

FinetuneMode finetune_mode_from_name(const std::string& name);

struct FinetuneConfig {
    FinetuneMode mode = FinetuneMode::linear_probe;
    int64_t rank = 8;
    int64_t iterations = 200;
    int64_t batch_size = 16;
    double base_lr = 1e-3;
    int64_t warmup_iters = 10;
    double weight_decay = 0.0;
    double drop_path = 0.2;  // lora/full training only
    bool use_cls = false;    // probe/head features: cls token vs mean-pooled patches
    uint64_t seed = 0;
    ProbeConfig probe;  // linear_probe mode
};

struct FinetuneResult {
    Tensor head_weight, head_bias;
    std::optional<DeltaWeights> adapter_delta;
    double val_accuracy = 0;
};

FinetuneResult finetune(const ViTModel& base, const Dataset& train, const Dataset& val,
                        const FinetuneConfig& cfg);

// jsonl log line for the scalar stream
std::string log_entry_json(const TrainLogEntry& e);

} // namespace explora
