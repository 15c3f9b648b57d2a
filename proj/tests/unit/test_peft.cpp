#include "doctest.h"

#include <cmath>
#include <cstring>

#include "explora/peft.hpp"

using namespace explora;
namespace op = explora::ops;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && a.dtype() == b.dtype() &&
           std::memcmp(a.bytes().data(), b.bytes().data(), a.bytes().size()) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0;
    for (int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::fabs(a.at(i) - b.at(i)));
    return worst;
}

Partition desk_partition(std::set<int64_t> u = {6}, int64_t r = 8) {
    Partition p;
    p.unfrozen_blocks = std::move(u);
    p.rank = r;
    return p;
}

Tensor random_images(int64_t b, const ViTConfig& cfg, Rng& rng) {
    return Tensor::randn({b, cfg.in_channels, cfg.image_size, cfg.image_size}, rng, 1.0, cfg.dtype);
}

// one crude SGD step over whatever has gradients
void sgd_step(const ViTModel& m, const Tensor& images) {
    Tape tape;
    ForwardResult res = vit_forward(m, images);
    Tensor loss = op::mean(op::mul(res.cls, res.cls));
    tape.backward(loss);
    for (NamedParam np : trainable_params(m)) {
        if (!np.tensor.has_grad()) continue;
        for (int64_t i = 0; i < np.tensor.numel(); ++i) {
            const double g = np.tensor.dtype() == DType::f32
                                 ? std::as_const(np.tensor).grad<float>()[static_cast<size_t>(i)]
                                 : std::as_const(np.tensor).grad<double>()[static_cast<size_t>(i)];
            np.tensor.set(i, np.tensor.at(i) - 0.05 * g);
        }
        np.tensor.zero_grad();
    }
}

} // namespace

TEST_CASE("zero-initialized adapter leaves the forward bitwise unchanged") {
    ViTConfig cfg = ViTConfig::desk();
    Rng rng(0);
    ViTModel base = ViTModel::init(cfg, rng);
    ViTModel adapted = base.clone();
    Rng inj(1);
    inject(adapted, desk_partition(), inj);
    Tensor x = random_images(4, cfg, rng);
    ForwardResult a = vit_forward(base, x);
    ForwardResult b = vit_forward(adapted, x);
    CHECK(bitwise_equal(a.cls, b.cls));
    CHECK(bitwise_equal(a.patches, b.patches));
}

TEST_CASE("rank zero leaves structure unchanged except freeze flags") {
    ViTConfig cfg = ViTConfig::desk();
    Rng rng(2);
    ViTModel m = ViTModel::init(cfg, rng);
    const size_t n_params = m.named_params().size();
    Rng inj(3);
    inject(m, desk_partition({6}, 0), inj);
    CHECK(m.named_params().size() == n_params);  // no adapters appeared
    CHECK(!m.has_adapters());
    CHECK(!m.blocks[0].wq.weight.requires_grad());
    CHECK(m.blocks[5].wq.weight.requires_grad());
    CHECK(m.blocks[0].ln1.gamma.requires_grad());
}

TEST_CASE("double injection and oversized rank are rejected") {
    ViTConfig cfg = ViTConfig::desk();
    Rng rng(4);
    ViTModel m = ViTModel::init(cfg, rng);
    Rng inj(5);
    inject(m, desk_partition(), inj);
    CHECK_THROWS_AS(inject(m, desk_partition(), inj), StateError);

    ViTModel m2 = ViTModel::init(cfg, rng);
    CHECK_THROWS_AS(inject(m2, desk_partition({6}, 1024), inj), ContractError);
}

TEST_CASE("gradient steps touch only adapters outside U") {
    ViTConfig cfg = ViTConfig::desk();
    cfg.dtype = DType::f64;  // so even tiny second-step A updates register bitwise
    Rng rng(6);
    ViTModel m = ViTModel::init(cfg, rng);
    Rng inj(7);
    Partition part = desk_partition({6}, 4);
    part.norms_unfrozen = false;
    inject(m, part, inj);
    // snapshot frozen-block base weights and adapters
    Tensor w0 = m.blocks[0].wq.weight.clone();
    Tensor a0 = m.blocks[0].wq.adapter->a.clone();
    Tensor b0 = m.blocks[0].wq.adapter->b.clone();
    Tensor x = random_images(2, cfg, rng);
    // step 1 moves B only (A's gradient is zero while B is zero); step 2 moves both
    sgd_step(m, x);
    CHECK(bitwise_equal(w0, m.blocks[0].wq.weight));
    CHECK(bitwise_equal(a0, m.blocks[0].wq.adapter->a));
    CHECK(!bitwise_equal(b0, m.blocks[0].wq.adapter->b));
    sgd_step(m, x);
    CHECK(bitwise_equal(w0, m.blocks[0].wq.weight));
    CHECK(!bitwise_equal(a0, m.blocks[0].wq.adapter->a));
}

TEST_CASE("freeze soundness across several optimizer steps") {
    ViTConfig cfg = ViTConfig::desk();
    cfg.depth = 3;
    Rng rng(8);
    ViTModel m = ViTModel::init(cfg, rng);
    Rng inj(9);
    Partition part = desk_partition({3}, 4);
    inject(m, part, inj);
    const std::set<std::string> trainable = partition_trainable_names(cfg, part);
    std::vector<std::pair<std::string, Tensor>> frozen_snapshot;
    for (const NamedParam& np : m.named_params())
        if (!trainable.count(np.name)) frozen_snapshot.emplace_back(np.name, np.tensor.clone());
    Tensor x = random_images(2, cfg, rng);
    for (int i = 0; i < 5; ++i) sgd_step(m, x);
    for (const auto& [name, snap] : frozen_snapshot) {
        for (const NamedParam& np : m.named_params())
            if (np.name == name) CHECK(bitwise_equal(snap, np.tensor));
    }
}

TEST_CASE("merge matches the adapted forward") {
    ViTConfig cfg = ViTConfig::desk();
    Rng rng(10);
    ViTModel base = ViTModel::init(cfg, rng);
    for (uint64_t seed : {11u, 12u}) {
        ViTModel adapted = base.clone();
        Rng inj(seed);
        inject(adapted, desk_partition({6}, 8), inj);
        // pretend training happened: randomize both adapter factors
        for (Block& b : adapted.blocks)
            for (Linear* l : {&b.wq, &b.wv})
                if (l->adapter.has_value()) {
                    Rng r2(seed + 100);
                    l->adapter->a = Tensor::randn(l->adapter->a.shape(), r2, 0.2, cfg.dtype);
                    l->adapter->b = Tensor::randn(l->adapter->b.shape(), r2, 0.2, cfg.dtype);
                }
        ViTModel plain = merged(adapted);
        CHECK(!plain.has_adapters());
        Tensor x = random_images(16, cfg, rng);
        ForwardResult fa = vit_forward(adapted, x);
        ForwardResult fm = vit_forward(plain, x);
        CHECK(max_abs_diff(fa.cls, fm.cls) < 1e-5);
        CHECK(max_abs_diff(fa.patches, fm.patches) < 1e-5);
    }
}

TEST_CASE("merge of a zero adapter is bitwise identical to the base") {
    ViTConfig cfg = ViTConfig::desk();
    Rng rng(13);
    ViTModel base = ViTModel::init(cfg, rng);
    ViTModel adapted = base.clone();
    Rng inj(14);
    inject(adapted, desk_partition(), inj);
    ViTModel plain = merged(adapted);
    auto bp = base.named_params();
    auto pp = plain.named_params();
    REQUIRE(bp.size() == pp.size());
    for (size_t i = 0; i < bp.size(); ++i) CHECK(bitwise_equal(bp[i].tensor, pp[i].tensor));
}

TEST_CASE("merge then re-inject then merge is idempotent") {
    ViTConfig cfg = ViTConfig::desk();
    Rng rng(15);
    ViTModel m = ViTModel::init(cfg, rng);
    Rng inj(16);
    inject(m, desk_partition({6}, 8), inj);
    for (Block& b : m.blocks)
        for (Linear* l : {&b.wq, &b.wv})
            if (l->adapter.has_value()) {
                Rng r2(17);
                l->adapter->b = Tensor::randn(l->adapter->b.shape(), r2, 0.3, cfg.dtype);
            }
    ViTModel m1 = merged(m);
    ViTModel m2 = m1.clone();
    Rng inj2(18);
    inject(m2, desk_partition({6}, 8), inj2);
    ViTModel m3 = merged(m2);
    auto p1 = m1.named_params();
    auto p3 = m3.named_params();
    REQUIRE(p1.size() == p3.size());
    for (size_t i = 0; i < p1.size(); ++i) CHECK(max_abs_diff(p1[i].tensor, p3[i].tensor) < 1e-6);
}

TEST_CASE("apply_delta attach/merge and roundtrip") {
    ViTConfig cfg = ViTConfig::desk();
    Rng rng(19);
    ViTModel base = ViTModel::init(cfg, rng);
    ViTModel adapted = base.clone();
    Rng inj(20);
    Partition part = desk_partition({6}, 4);
    inject(adapted, part, inj);
    Tensor x = random_images(2, cfg, rng);
    sgd_step(adapted, x);
    sgd_step(adapted, x);

    DeltaWeights delta = extract_delta(adapted, part);
    CHECK(delta.scalar_count() == param_count(cfg, part).trainable);

    ViTModel attached = apply_delta(base, delta, ApplyMode::attach);
    ForwardResult fa = vit_forward(adapted, x);
    ForwardResult fb = vit_forward(attached, x);
    CHECK(bitwise_equal(fa.cls, fb.cls));

    ViTModel folded = apply_delta(base, delta, ApplyMode::merge);
    CHECK(!folded.has_adapters());
    ForwardResult fc = vit_forward(folded, x);
    CHECK(max_abs_diff(fa.cls, fc.cls) < 1e-5);

    // bitwise roundtrip through a second extraction
    DeltaWeights delta2 = extract_delta(attached, part);
    REQUIRE(delta.tensors.size() == delta2.tensors.size());
    for (size_t i = 0; i < delta.tensors.size(); ++i) {
        CHECK(delta.tensors[i].name == delta2.tensors[i].name);
        CHECK(bitwise_equal(delta.tensors[i].tensor, delta2.tensors[i].tensor));
    }
}

TEST_CASE("zero delta reproduces the base model") {
    ViTConfig cfg = ViTConfig::desk();
    Rng rng(21);
    ViTModel base = ViTModel::init(cfg, rng);
    ViTModel adapted = base.clone();
    Rng inj(22);
    Partition part = desk_partition({6}, 4);
    inject(adapted, part, inj);
    DeltaWeights delta = extract_delta(adapted, part);
    ViTModel out = apply_delta(base, delta, ApplyMode::merge);
    Tensor x = random_images(2, cfg, rng);
    CHECK(bitwise_equal(vit_forward(base, x).cls, vit_forward(out, x).cls));
}

TEST_CASE("depth mismatch yields a compatibility error") {
    ViTConfig big = ViTConfig::desk();
    big.depth = 12;
    ViTConfig small = ViTConfig::desk();
    Rng rng(23);
    ViTModel big_model = ViTModel::init(big, rng);
    ViTModel small_base = ViTModel::init(small, rng);
    Partition part = desk_partition({12}, 4);
    Rng inj(24);
    inject(big_model, part, inj);
    DeltaWeights delta = extract_delta(big_model, part);
    CHECK_THROWS_AS((void)apply_delta(small_base, delta, ApplyMode::attach), CompatError);
}

TEST_CASE("extract_delta validates the injected partition") {
    ViTConfig cfg = ViTConfig::desk();
    Rng rng(25);
    ViTModel m = ViTModel::init(cfg, rng);
    Partition part = desk_partition({6}, 4);
    CHECK_THROWS_AS((void)extract_delta(m, part), StateError);  // never injected
}

TEST_CASE("closed-form LoRA-only delta size") {
    ViTConfig cfg = ViTConfig::desk();
    Partition p;
    p.rank = 8;
    p.norms_unfrozen = false;
    const auto count = param_count(cfg, p);
    CHECK(count.trainable == cfg.depth * 2 * 2 * (cfg.dim * 8));
}
