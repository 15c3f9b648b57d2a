#include "explora/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace explora {

namespace op = ops;

Objective objective_from_name(const std::string& name) {
    if (name == "mae") return Objective::mae;
    if (name == "dino") return Objective::dino;
    if (name == "supervised") return Objective::supervised;
    throw ContractError("unknown objective '" + name + "'");
}

std::string objective_name(Objective o) {
    switch (o) {
        case Objective::mae: return "mae";
        case Objective::dino: return "dino";
        case Objective::supervised: return "supervised";
    }
    return "?";
}

void RunConfig::validate(const ViTConfig& cfg) const {
    partition.validate(cfg);
    if (batch_size <= 0 || accum_steps <= 0)
        throw ContractError("RunConfig: effective batch size must be positive");
    if (iterations < 0) throw ContractError("RunConfig: iterations must be >= 0");
    if (base_lr <= 0) throw ContractError("RunConfig: base_lr must be positive");
    if (objective == Objective::supervised)
        throw ContractError("RunConfig: supervised runs go through finetune()");
    if (objective == Objective::mae) mae.validate();
    if (objective == Objective::dino) dino.validate();
}

std::string log_entry_json(const TrainLogEntry& e) {
    Json j;
    j["iter"] = e.iter;
    j["loss"] = e.loss;
    j["lr"] = e.lr;
    j["grad_norm"] = e.grad_norm;
    for (const auto& [k, v] : e.components) j[k] = v;
    return j.dump();
}

namespace {

std::vector<NamedParam> collect_trainable(const std::vector<NamedParam>& all) {
    std::vector<NamedParam> out;
    for (const NamedParam& np : all)
        if (np.tensor.requires_grad() && np.tensor.has_grad()) out.push_back(np);
    return out;
}

std::vector<NamedParam> prefixed(const std::string& prefix, std::vector<NamedParam> params) {
    for (NamedParam& np : params) np.name = prefix + np.name;
    return params;
}

void copy_into(const std::vector<NamedParam>& dst, const TensorArchive& src, const std::string& prefix) {
    for (const NamedParam& np : dst) {
        const Tensor* t = src.find(prefix + np.name);
        if (!t) throw CompatError("state archive lacks '" + prefix + np.name + "'");
        if (t->shape() != np.tensor.shape() || t->dtype() != np.tensor.dtype())
            throw CompatError("state archive shape mismatch for '" + prefix + np.name + "'");
        Tensor d = np.tensor;
        std::memcpy(d.bytes().data(), t->bytes().data(), t->bytes().size());
    }
}

} // namespace

void save_delta(const std::string& path, const DeltaWeights& delta, const ViTConfig& cfg,
                uint64_t base_hash, int64_t iteration, const std::string& rng_state) {
    TensorArchive ar;
    ar.manifest["kind"] = "delta";
    ar.manifest["format_version"] = 1;
    ar.manifest["config"] = config_to_json(cfg);
    ar.manifest["partition"] = partition_to_json(delta.partition);
    ar.manifest["base_hash"] = base_hash;
    ar.manifest["iteration"] = iteration;
    ar.manifest["rng_state"] = rng_state;
    for (const NamedParam& np : delta.tensors) ar.add(np.name, np.tensor);
    ar.save(path);
}

LoadedDelta load_delta(const std::string& path) {
    TensorArchive ar = TensorArchive::load(path);
    if (ar.manifest.value("kind", "") != "delta")
        throw DataError("'" + path + "' is not a delta checkpoint");
    LoadedDelta out;
    out.config = config_from_json(ar.manifest.at("config"));
    out.delta.partition = partition_from_json(ar.manifest.at("partition"));
    out.base_hash = ar.manifest.value("base_hash", uint64_t{0});
    out.iteration = ar.manifest.value("iteration", int64_t{0});
    out.rng_state = ar.manifest.value("rng_state", "");
    for (const NamedParam& np : ar.entries) {
        Tensor t = np.tensor;
        t.set_requires_grad(false);
        out.delta.tensors.push_back({np.name, t});
    }
    return out;
}

ViTModel merge_delta_onto(const ViTModel& base, const LoadedDelta& delta) {
    if (!(base.config == delta.config))
        throw CompatError("merge: base model config does not match the delta's config");
    const uint64_t h = model_hash(base);
    if (delta.base_hash != 0 && delta.base_hash != h)
        throw CompatError("merge: base model hash " + std::to_string(h) +
                          " does not match the delta's recorded base " +
                          std::to_string(delta.base_hash));
    return apply_delta(base, delta.delta, ApplyMode::merge);
}

namespace {

struct TrainingState {
    ViTModel model;  // injected encoder/student
    std::optional<MAEDecoder> decoder;
    std::optional<DinoState> dino;
    OptimizerState opt;
    Rng loop_rng{0};
    int64_t start_iter = 0;

    std::vector<NamedParam> all_named(const RunConfig& run) const {
        std::vector<NamedParam> out;
        if (run.objective == Objective::dino) {
            out = prefixed("backbone.", dino->student.named_params());
            for (NamedParam np : prefixed("head.", dino->head_s.named_params())) out.push_back(np);
            out.push_back({"mask_token", dino->mask_token});
        } else {
            out = prefixed("backbone.", model.named_params());
            for (NamedParam np : prefixed("decoder.", decoder->named_params())) out.push_back(np);
        }
        return out;
    }
};

void save_training_state(const std::string& path, const TrainingState& st, const RunConfig& run,
                         const ViTConfig& cfg, uint64_t base_hash, int64_t next_iter) {
    TensorArchive ar;
    ar.manifest["kind"] = "state";
    ar.manifest["format_version"] = 1;
    ar.manifest["objective"] = objective_name(run.objective);
    ar.manifest["config"] = config_to_json(cfg);
    ar.manifest["partition"] = partition_to_json(run.partition);
    ar.manifest["base_hash"] = base_hash;
    ar.manifest["iteration"] = next_iter;
    ar.manifest["rng_state"] = st.loop_rng.serialize();
    for (const NamedParam& np : st.all_named(run)) ar.add(np.name, np.tensor);
    if (run.objective == Objective::dino) {
        for (const NamedParam& np : prefixed("teacher.", st.dino->teacher.named_params()))
            ar.add(np.name, np.tensor);
        for (const NamedParam& np : prefixed("head_t.", st.dino->head_t.named_params()))
            ar.add(np.name, np.tensor);
    }
    Json steps = Json::object();
    for (const auto& [name, slot] : st.opt.slots) {
        ar.add("opt.m." + name, slot.m);
        ar.add("opt.v." + name, slot.v);
        steps[name] = slot.step;
    }
    ar.manifest["opt_steps"] = steps;
    ar.save(path);
}

void load_training_state(const std::string& path, TrainingState& st, const RunConfig& run,
                         const ViTConfig& cfg, uint64_t base_hash) {
    TensorArchive ar = TensorArchive::load(path);
    if (ar.manifest.value("kind", "") != "state")
        throw DataError("'" + path + "' is not a training-state archive");
    if (ar.manifest.value("objective", "") != objective_name(run.objective))
        throw CompatError("resume: state objective differs from the run's objective");
    if (!(config_from_json(ar.manifest.at("config")) == cfg))
        throw CompatError("resume: state config differs from the base model config");
    if (!(partition_from_json(ar.manifest.at("partition")) == run.partition))
        throw CompatError("resume: state partition differs from the run partition");
    const uint64_t h = ar.manifest.value("base_hash", uint64_t{0});
    if (h != 0 && base_hash != 0 && h != base_hash)
        throw CompatError("resume: state was trained from a different base model");

    copy_into(st.all_named(run), ar, "");
    if (run.objective == Objective::dino) {
        copy_into(st.dino->teacher.named_params(), ar, "teacher.");
        copy_into(st.dino->head_t.named_params(), ar, "head_t.");
    }
    st.opt.clear();
    const Json steps = ar.manifest.value("opt_steps", Json::object());
    for (const auto& [name, step] : steps.items()) {
        const Tensor* m = ar.find("opt.m." + name);
        const Tensor* v = ar.find("opt.v." + name);
        if (!m || !v) throw CompatError("resume: optimizer state incomplete for '" + name + "'");
        OptimizerState::Slot slot;
        slot.m = m->clone();
        slot.v = v->clone();
        slot.step = step.get<int64_t>();
        st.opt.slots.emplace(name, std::move(slot));
    }
    st.loop_rng.deserialize(ar.manifest.at("rng_state").get<std::string>());
    st.start_iter = ar.manifest.value("iteration", int64_t{0});
}

} // namespace

PretrainResult pretrain(const ViTModel& base, const Dataset& unlabeled, const RunConfig& run,
                        const PretrainOptions& opts) {
    base.config.validate();
    run.validate(base.config);
    if (unlabeled.size() <= 0) throw DataError("pretrain: empty dataset");
    if (unlabeled.images.dim(1) != base.config.in_channels)
        throw CompatError("pretrain: dataset channels do not match the model config");
    const uint64_t base_hash = model_hash(base);

    TrainingState st;
    st.loop_rng = Rng(Rng::derive(run.seed, 1));
    Rng init_rng(Rng::derive(run.seed, 0));

    st.model = base.clone();
    inject(st.model, run.partition, init_rng);

    if (run.objective == Objective::mae) {
        MAEDecoder dec = opts.init_decoder ? opts.init_decoder->clone()
                                           : MAEDecoder::init(base.config, run.mae, init_rng);
        if (run.partition.is_full(base.config.depth)) {
            dec.set_all_requires_grad(true);  // from-scratch pre-training trains g fully
        } else {
            if (dec.has_adapters()) throw StateError("pretrain: decoder already carries adapters");
            inject_decoder(dec, run.mae.decoder_rank, init_rng);
        }
        st.decoder = std::move(dec);
    } else {
        DinoState ds = DinoState::init(st.model, run.dino, init_rng);
        st.dino = std::move(ds);
    }

    if (!opts.state_in.empty()) load_training_state(opts.state_in, st, run, base.config, base_hash);

    Schedule sched{run.base_lr, run.warmup_iters, run.iterations};
    AdamWConfig adamw;
    adamw.weight_decay = run.weight_decay;

    PretrainResult result;
    int bad_streak = 0;
    const int64_t batch = std::min<int64_t>(run.batch_size, unlabeled.size());
    const double loss_scale = 1.0 / static_cast<double>(run.accum_steps);
    const int64_t end_iter = (opts.halt_at >= 0 && opts.halt_at < run.iterations) ? opts.halt_at
                                                                                  : run.iterations;

    for (int64_t t = st.start_iter; t < end_iter; ++t) {
        double loss_sum = 0;
        std::map<std::string, double> comps;
        bool step_ok = true;
        for (int64_t micro = 0; micro < run.accum_steps; ++micro) {
            std::vector<int64_t> idx = st.loop_rng.sample_without_replacement(unlabeled.size(), batch);
            Tensor images = unlabeled.batch(idx);
            try {
                if (run.objective == Objective::mae) {
                    Tape tape;
                    MAEStepResult r = mae_step(st.model, *st.decoder, images, run.mae, st.loop_rng,
                                               loss_scale);
                    loss_sum += r.loss;
                    comps["mse"] += r.loss;
                } else {
                    DinoStepResult r = dino_step(*st.dino, images, run.dino, t, run.iterations,
                                                 st.loop_rng, loss_scale);
                    loss_sum += r.total;
                    comps["dino"] += r.dino;
                    comps["ibot"] += r.ibot;
                    comps["koleo"] += r.koleo;
                }
            } catch (const NumericError& e) {
                zero_grads(st.all_named(run));
                if (++bad_streak >= 3)
                    throw NumericError("pretrain: aborted after 3 consecutive non-finite losses; last: " +
                                       std::string(e.what()));
                step_ok = false;
                break;
            }
        }
        if (!step_ok) continue;
        bad_streak = 0;
        const double loss = loss_sum / static_cast<double>(run.accum_steps);
        for (auto& [k, v] : comps) v /= static_cast<double>(run.accum_steps);
        if (t == st.start_iter) result.initial_loss = loss;
        result.final_loss = loss;

        std::vector<NamedParam> trainable = collect_trainable(st.all_named(run));
        double gnorm = 0;
        if (run.clip_norm > 0) gnorm = clip_grad_norm(trainable, run.clip_norm);
        const double lr = sched.lr_at(t);
        adamw_step(trainable, st.opt, lr, adamw);
        zero_grads(st.all_named(run));
        if (run.objective == Objective::dino)
            st.dino->ema(ema_lambda_at(run.dino.ema_initial, t + 1, run.iterations));

        if (opts.log && (t % std::max<int64_t>(1, run.log_every) == 0 || t + 1 == end_iter)) {
            TrainLogEntry entry;
            entry.iter = t;
            entry.loss = loss;
            entry.lr = lr;
            entry.grad_norm = gnorm;
            entry.components = comps;
            opts.log(entry);
        }
    }

    if (run.objective == Objective::dino) st.model = st.dino->student;
    result.model = st.model;
    result.decoder = st.decoder;
    result.delta = extract_delta(st.model, run.partition);
    result.base_hash = base_hash;
    if (!opts.state_out.empty())
        save_training_state(opts.state_out, st, run, base.config, base_hash, end_iter);
    return result;
}

FinetuneMode finetune_mode_from_name(const std::string& name) {
    if (name == "lora") return FinetuneMode::lora;
    if (name == "linear_probe" || name == "probe") return FinetuneMode::linear_probe;
    if (name == "full") return FinetuneMode::full;
    throw ContractError("unknown finetune mode '" + name + "'");
}

FinetuneResult finetune(const ViTModel& base, const Dataset& train, const Dataset& val,
                        const FinetuneConfig& cfg) {
    if (train.size() <= 0 || val.size() <= 0) throw DataError("finetune: empty split");
    if (train.classes < 2) throw DataError("finetune: need at least two classes");
    for (int64_t y : train.labels)
        if (y < 0 || y >= train.classes)
            throw DataError("finetune: class index " + std::to_string(y) + " out of range");

    FinetuneResult out;
    const FeatureSpec spec{1, cfg.use_cls};

    if (cfg.mode == FinetuneMode::linear_probe) {
        Tensor xt = extract_features(base, train.images, spec);
        Tensor xv = extract_features(base, val.images, spec);
        ProbeConfig pc = cfg.probe;
        pc.seed = cfg.seed;
        ProbeHead head = train_logistic_head(xt, train.labels, xv, val.labels, train.classes, pc);
        out.head_weight = head.weight;
        out.head_bias = head.bias;
        out.val_accuracy = head.accuracy;
        return out;
    }

    ViTModel model = base.clone();
    Rng rng(Rng::derive(cfg.seed, 2));
    Partition part;
    if (cfg.mode == FinetuneMode::lora) {
        part.rank = cfg.rank;
        part.targets = {Target::q, Target::v};
        part.norms_unfrozen = false;
        inject(model, part, rng);
    } else {
        part = Partition::full(model.config.depth);
        inject(model, part, rng);
    }
    Linear head = Linear::init(model.config.dim, train.classes, rng, model.config.dtype, 0.01);

    OptimizerState opt;
    AdamWConfig adamw;
    adamw.weight_decay = cfg.weight_decay;
    Schedule sched{cfg.base_lr, cfg.warmup_iters, cfg.iterations};
    const int64_t batch = std::min<int64_t>(cfg.batch_size, train.size());

    for (int64_t t = 0; t < cfg.iterations; ++t) {
        std::vector<int64_t> idx = rng.sample_without_replacement(train.size(), batch);
        Tensor images = train.batch(idx);
        std::vector<int64_t> labels;
        for (int64_t i : idx) labels.push_back(train.labels[static_cast<size_t>(i)]);

        Tape tape;
        ForwardOptions fwd;
        fwd.drop_path = cfg.drop_path;
        fwd.rng = &rng;
        ForwardResult res = vit_forward(model, images, fwd);
        Tensor feats = cfg.use_cls ? res.cls : op::mean_axis(res.patches, 1);
        Tensor logits = head.forward(feats);
        Tensor loss = op::softmax_cross_entropy(logits, labels);
        tape.backward(loss);

        std::vector<NamedParam> params = prefixed("backbone.", model.named_params());
        params.push_back({"head.weight", head.weight});
        params.push_back({"head.bias", head.bias});
        std::vector<NamedParam> trainable = collect_trainable(params);
        adamw_step(trainable, opt, sched.lr_at(t), adamw);
        zero_grads(params);
    }

    // evaluation without drop-path
    {
        NoGrad ng;
        ForwardResult res = vit_forward(model, val.images);
        Tensor feats = cfg.use_cls ? res.cls : op::mean_axis(res.patches, 1);
        Tensor logits = head.forward(feats);
        int64_t hits = 0;
        const int64_t n = logits.dim(0), c = logits.dim(1);
        for (int64_t i = 0; i < n; ++i) {
            int64_t best = 0;
            double bv = logits.at(i * c);
            for (int64_t j = 1; j < c; ++j)
                if (logits.at(i * c + j) > bv) {
                    bv = logits.at(i * c + j);
                    best = j;
                }
            if (best == val.labels[static_cast<size_t>(i)]) ++hits;
        }
        out.val_accuracy = static_cast<double>(hits) / static_cast<double>(n);
    }
    out.head_weight = head.weight;
    out.head_bias = head.bias;
    if (cfg.mode == FinetuneMode::lora) out.adapter_delta = extract_delta(model, part);
    return out;
}

} // namespace explora
