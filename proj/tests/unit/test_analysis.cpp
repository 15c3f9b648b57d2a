#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "explora/analysis.hpp"

using namespace explora;
namespace op = explora::ops;
namespace fs = std::filesystem;

namespace {

// independent oracle: cyclic Jacobi eigenvalue iteration
std::vector<double> jacobi_eigenvalues(std::vector<double> a, int64_t n) {
    auto A = [&](int64_t i, int64_t j) -> double& { return a[static_cast<size_t>(i * n + j)]; };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i + 1; j < n; ++j) off += A(i, j) * A(i, j);
        if (off < 1e-24) break;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) {
                if (std::fabs(A(p, q)) < 1e-300) continue;
                const double theta = (A(q, q) - A(p, p)) / (2.0 * A(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    const double akp = A(k, p), akq = A(k, q);
                    A(k, p) = c * akp - s * akq;
                    A(k, q) = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double apk = A(p, k), aqk = A(q, k);
                    A(p, k) = c * apk - s * aqk;
                    A(q, k) = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> d(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) d[static_cast<size_t>(i)] = A(i, i);
    std::sort(d.begin(), d.end());
    return d;
}

std::string temp_path(const std::string& name) {
    return (fs::temp_directory_path() / ("explora_analysis_" + std::to_string(::getpid()) + "_" + name))
        .string();
}

BlockFeatureDump dump_from(const std::vector<Tensor>& patch_feats) {
    BlockFeatureDump d;
    d.depth = static_cast<int64_t>(patch_feats.size());
    d.samples = patch_feats[0].dim(0);
    d.tokens = patch_feats[0].dim(1);
    d.dim = patch_feats[0].dim(2);
    for (const Tensor& p : patch_feats) {
        d.patch_feats.push_back(p);
        NoGrad ng;
        d.cls_feats.push_back(op::mean_axis(p, 1));
    }
    return d;
}

} // namespace

TEST_CASE("sym_eigenvalues on diagonal and identity matrices") {
    std::vector<double> diag{3, 0, 0, 0, -1, 0, 0, 0, 7};
    auto e = sym_eigenvalues(diag, 3);
    CHECK(e[0] == doctest::Approx(-1));
    CHECK(e[1] == doctest::Approx(3));
    CHECK(e[2] == doctest::Approx(7));

    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[static_cast<size_t>(i * 4 + i)] = 1.0;
    for (double v : sym_eigenvalues(eye, 4)) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("sym_eigenvalues matches the Jacobi oracle on random symmetric matrices") {
    Rng rng(0);
    for (int trial = 0; trial < 5; ++trial) {
        const int64_t n = 6;
        std::vector<double> a(static_cast<size_t>(n * n));
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i; j < n; ++j) {
                const double v = rng.normal();
                a[static_cast<size_t>(i * n + j)] = v;
                a[static_cast<size_t>(j * n + i)] = v;
            }
        auto mine = sym_eigenvalues(a, n);
        auto oracle = jacobi_eigenvalues(a, n);
        for (int64_t i = 0; i < n; ++i)
            CHECK(std::fabs(mine[static_cast<size_t>(i)] - oracle[static_cast<size_t>(i)]) < 1e-8);
    }
}

TEST_CASE("block_spectra sanity on i.i.d. gaussian features") {
    Rng rng(1);
    // 10k rows in d=8: mean covariance eigenvalue should be 1 within 5%
    Tensor feats = Tensor::randn({625, 16, 8}, rng, 1.0, DType::f32);
    BlockFeatureDump dump = dump_from({feats});
    SpectralReport rep = block_spectra(dump);
    REQUIRE(rep.blocks.size() == 1);
    CHECK(std::fabs(rep.blocks[0].mean_eigenvalue - 1.0) < 0.05);
}

TEST_CASE("block_spectra of identical rows is all-zero") {
    Tensor feats = Tensor::full({4, 8, 6}, 2.5);
    SpectralReport rep = block_spectra(dump_from({feats}));
    CHECK(rep.blocks[0].mean_eigenvalue == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(rep.blocks[0].eigenvalue_variance == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("block_spectra equals a brute-force eigendecomposition at d=6") {
    Rng rng(2);
    Tensor feats = Tensor::randn({20, 10, 6}, rng, 1.3, DType::f32);
    SpectralReport rep = block_spectra(dump_from({feats}), 6);

    // brute force: same centering, covariance, Jacobi eigenvalues
    const int64_t rows = 200, d = 6;
    std::vector<double> mean(6, 0.0);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += feats.at(r * d + j);
    for (double& m : mean) m /= static_cast<double>(rows);
    std::vector<double> cov(36, 0.0);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = 0; j < d; ++j)
                cov[static_cast<size_t>(i * d + j)] +=
                    (feats.at(r * d + i) - mean[static_cast<size_t>(i)]) *
                    (feats.at(r * d + j) - mean[static_cast<size_t>(j)]);
    for (double& c : cov) c /= static_cast<double>(rows - 1);
    auto oracle = jacobi_eigenvalues(cov, d);
    double mu = 0;
    for (double v : oracle) mu += v;
    mu /= 6.0;
    CHECK(std::fabs(rep.blocks[0].mean_eigenvalue - mu) < 1e-8);
    for (int64_t i = 0; i < d; ++i)
        CHECK(std::fabs(rep.blocks[0].top[static_cast<size_t>(i)] - oracle[static_cast<size_t>(5 - i)]) <
              1e-8);
    // PSD up to rounding
    CHECK(oracle[0] > -1e-8);
}

TEST_CASE("train_logistic_head separates separable data") {
    // features: one-hot of the label plus noise
    Rng rng(3);
    const int64_t n = 120, f = 4, classes = 4;
    Tensor x = Tensor::zeros({n, f}, DType::f32);
    std::vector<int64_t> y;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t c = i % classes;
        y.push_back(c);
        for (int64_t j = 0; j < f; ++j) x.set(i * f + j, (j == c ? 1.0 : 0.0) + 0.05 * rng.normal());
    }
    ProbeHead head = train_logistic_head(x, y, x, y, classes, {});
    CHECK(head.accuracy == doctest::Approx(1.0));
}

TEST_CASE("position_probe hits 1.0 on one-hot position features") {
    const int64_t s = 30, n = 8, d = 8;
    Tensor feats = Tensor::zeros({s, n, d}, DType::f32);
    Rng rng(4);
    for (int64_t i = 0; i < s; ++i)
        for (int64_t j = 0; j < n; ++j)
            for (int64_t k = 0; k < d; ++k)
                feats.set((i * n + j) * d + k, (k == j ? 1.0 : 0.0) + 0.02 * rng.normal());
    BlockFeatureDump dump = dump_from({feats});
    CHECK(position_probe(dump, 1) == doctest::Approx(1.0));
}

TEST_CASE("position_probe sits at chance for position-independent features") {
    const int64_t s = 50, n = 4, d = 6;
    double mean_acc = 0;
    const int seeds = 5;
    for (int seed = 0; seed < seeds; ++seed) {
        Rng rng(static_cast<uint64_t>(seed) + 10);
        Tensor feats = Tensor::zeros({s, n, d}, DType::f32);
        for (int64_t i = 0; i < s; ++i) {
            // every position in a sample carries the same random vector
            std::vector<double> row(static_cast<size_t>(d));
            for (double& v : row) v = rng.normal();
            for (int64_t j = 0; j < n; ++j)
                for (int64_t k = 0; k < d; ++k) feats.set((i * n + j) * d + k, row[static_cast<size_t>(k)]);
        }
        ProbeConfig cfg;
        cfg.seed = static_cast<uint64_t>(seed);
        const double acc = position_probe(dump_from({feats}), 1, cfg);
        CHECK(acc >= 0.0);
        CHECK(acc <= 1.0);
        mean_acc += acc;
    }
    mean_acc /= seeds;
    const double chance = 1.0 / static_cast<double>(n);
    const int64_t val_rows = static_cast<int64_t>(0.2 * s * n);
    const double sigma = std::sqrt(chance * (1 - chance) / static_cast<double>(val_rows * seeds));
    CHECK(std::fabs(mean_acc - chance) < 3.0 * sigma + 0.08);
}

TEST_CASE("position_probe is deterministic and validates input") {
    Rng rng(5);
    Tensor feats = Tensor::randn({10, 4, 6}, rng, 1.0, DType::f32);
    BlockFeatureDump dump = dump_from({feats});
    CHECK(position_probe(dump, 1) == position_probe(dump, 1));
    CHECK_THROWS_AS((void)position_probe(dump, 0), ContractError);
    CHECK_THROWS_AS((void)position_probe(dump, 9), ContractError);

    Tensor one = Tensor::randn({1, 4, 6}, rng, 1.0, DType::f32);
    CHECK_THROWS_AS((void)position_probe(dump_from({one}), 1), DataError);
}

TEST_CASE("class_probe separable and shuffled-label behavior") {
    const int64_t s = 80, n = 4, d = 6, classes = 2;
    Rng rng(6);
    Tensor feats = Tensor::zeros({s, n, d}, DType::f32);
    std::vector<int64_t> labels;
    for (int64_t i = 0; i < s; ++i) {
        const int64_t c = i % classes;
        labels.push_back(c);
        for (int64_t j = 0; j < n; ++j)
            for (int64_t k = 0; k < d; ++k)
                feats.set((i * n + j) * d + k, (c == 0 ? 1.0 : -1.0) + 0.1 * rng.normal());
    }
    BlockFeatureDump dump = dump_from({feats});
    CHECK(class_probe(dump, 1, labels, classes) == doctest::Approx(1.0));

    // shuffled labels: chance within a binomial window
    std::vector<int64_t> shuffled = labels;
    Rng shuffle_rng(7);
    for (size_t i = shuffled.size(); i > 1; --i)
        std::swap(shuffled[i - 1], shuffled[static_cast<size_t>(shuffle_rng.uniform_int(static_cast<int64_t>(i)))]);
    double mean_acc = 0;
    for (int seed = 0; seed < 5; ++seed) {
        ProbeConfig cfg;
        cfg.seed = static_cast<uint64_t>(seed);
        mean_acc += class_probe(dump, 1, shuffled, classes, cfg);
    }
    mean_acc /= 5.0;
    CHECK(std::fabs(mean_acc - 0.5) < 0.25);
}

TEST_CASE("recommend_unfreeze ordering, ties and permutation behavior") {
    SpectralReport rep;
    for (int i = 0; i < 6; ++i) {
        SpectralReport::BlockSpectrum b;
        b.mean_eigenvalue = 1.0 + i;  // strictly increasing
        rep.blocks.push_back(b);
    }
    CHECK(recommend_unfreeze(rep, 3) == std::vector<int64_t>{1, 2, 3});

    // two equal minima at blocks 9 and 24 (1-indexed): deeper one wins
    SpectralReport tie;
    for (int i = 0; i < 24; ++i) {
        SpectralReport::BlockSpectrum b;
        b.mean_eigenvalue = 5.0;
        tie.blocks.push_back(b);
    }
    tie.blocks[8].mean_eigenvalue = 1.0;   // block 9
    tie.blocks[23].mean_eigenvalue = 1.0;  // block 24
    auto picks = recommend_unfreeze(tie, 2);
    CHECK(picks == std::vector<int64_t>{24, 9});

    // the probe-quality ordering from the ablation narrative: deeper blocks
    // carry lower mean eigenvalues, so k=2 recommends the two deepest
    SpectralReport paper;
    for (int i = 0; i < 24; ++i) {
        SpectralReport::BlockSpectrum b;
        b.mean_eigenvalue = 10.0;
        paper.blocks.push_back(b);
    }
    paper.blocks[23].mean_eigenvalue = 1.0;  // best (block 24, 1-indexed)
    paper.blocks[22].mean_eigenvalue = 2.0;  // next (block 23)
    paper.blocks[0].mean_eigenvalue = 3.0;
    paper.blocks[8].mean_eigenvalue = 4.0;
    CHECK(recommend_unfreeze(paper, 2) == std::vector<int64_t>{24, 23});

    // permutation invariance modulo the deep-tie rule: reversing the profile
    // mirrors the picked indices
    SpectralReport fwd, rev;
    std::vector<double> means{4, 1, 3, 2};
    for (double m : means) {
        SpectralReport::BlockSpectrum b;
        b.mean_eigenvalue = m;
        fwd.blocks.push_back(b);
    }
    for (auto it = means.rbegin(); it != means.rend(); ++it) {
        SpectralReport::BlockSpectrum b;
        b.mean_eigenvalue = *it;
        rev.blocks.push_back(b);
    }
    auto f = recommend_unfreeze(fwd, 2);
    auto r = recommend_unfreeze(rev, 2);
    for (size_t i = 0; i < f.size(); ++i) CHECK(r[i] == 5 - f[i]);

    CHECK_THROWS_AS((void)recommend_unfreeze(fwd, 9), ContractError);
}

TEST_CASE("feature dump save/load roundtrip") {
    Rng rng(8);
    Tensor f0 = Tensor::randn({3, 4, 5}, rng, 1.0, DType::f32);
    Tensor f1 = Tensor::randn({3, 4, 5}, rng, 1.0, DType::f32);
    BlockFeatureDump dump = dump_from({f0, f1});
    dump.dataset_id = "unit";
    const std::string path = temp_path("dump.expl");
    dump.save(path);
    BlockFeatureDump back = BlockFeatureDump::load(path);
    CHECK(back.depth == 2);
    CHECK(back.dataset_id == "unit");
    for (int64_t i = 0; i < f0.numel(); ++i)
        CHECK(back.patch_feats[0].at(i) == dump.patch_feats[0].at(i));
}

TEST_CASE("collect_features matches all-block forwards") {
    ViTConfig cfg = ViTConfig::desk();
    cfg.depth = 2;
    Rng rng(9);
    ViTModel model = ViTModel::init(cfg, rng);
    Tensor images = Tensor::randn({3, 3, 32, 32}, rng);
    BlockFeatureDump dump = collect_features(model, images);
    CHECK(dump.depth == 2);
    CHECK(dump.samples == 3);
    CHECK(dump.tokens == 16);
    ForwardOptions opts;
    opts.collect = Collect::all_blocks;
    ForwardResult res = vit_forward(model, images, opts);
    for (int64_t i = 0; i < res.all_patches[0].numel(); ++i)
        CHECK(dump.patch_feats[0].at(i) == res.all_patches[0].at(i));
}

TEST_CASE("evaluate_linprobe grid semantics") {
    ViTConfig cfg = ViTConfig::desk();
    cfg.depth = 4;
    Rng rng(10);
    ViTModel model = ViTModel::init(cfg, rng);
    Dataset train, val;
    {
        Rng drng(11);
        train.images = Tensor::randn({20, 3, 32, 32}, drng, 1.0);
        val.images = Tensor::randn({10, 3, 32, 32}, drng, 1.0);
        train.classes = val.classes = 2;
        for (int64_t i = 0; i < 20; ++i) train.labels.push_back(i % 2);
        for (int64_t i = 0; i < 10; ++i) val.labels.push_back(i % 2);
    }
    // last4 concat width is 4d
    Tensor f = extract_features(model, val.images, {4, true});
    CHECK(f.dim(1) == 4 * cfg.dim);

    ProbeConfig pc;
    pc.epochs = 10;
    std::vector<FeatureSpec> specs{{1, true}, {4, false}};
    std::vector<double> lrs{0.01, 0.1};
    LinprobeGridResult grid = evaluate_linprobe(model, train, val, specs, lrs, pc);
    CHECK(grid.cells.size() == 4);
    for (const LinprobeCell& c : grid.cells) CHECK(grid.best.accuracy >= c.accuracy);

    CHECK_THROWS_AS((void)evaluate_linprobe(model, train, val, {}, lrs, pc), ContractError);
    CHECK_THROWS_AS((void)evaluate_linprobe(model, train, val, specs, {}, pc), ContractError);
}
