#include "explora/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "explora/optim.hpp"

namespace explora {

namespace op = ops;

std::vector<double> sym_eigenvalues(std::vector<double> a, int64_t n) {
    if (n <= 0 || static_cast<int64_t>(a.size()) != n * n)
        throw ShapeError("sym_eigenvalues: matrix size mismatch");
    // Householder reduction to tridiagonal form (values-only tred2 variant)
    std::vector<double> d(static_cast<size_t>(n)), e(static_cast<size_t>(n), 0.0);
    auto A = [&](int64_t i, int64_t j) -> double& { return a[static_cast<size_t>(i * n + j)]; };
    for (int64_t i = n - 1; i >= 1; --i) {
        const int64_t l = i - 1;
        double h = 0, scl = 0;
        if (l > 0) {
            for (int64_t k = 0; k <= l; ++k) scl += std::fabs(A(i, k));
            if (scl == 0.0) {
                e[static_cast<size_t>(i)] = A(i, l);
            } else {
                for (int64_t k = 0; k <= l; ++k) {
                    A(i, k) /= scl;
                    h += A(i, k) * A(i, k);
                }
                double f = A(i, l);
                double g = f >= 0 ? -std::sqrt(h) : std::sqrt(h);
                e[static_cast<size_t>(i)] = scl * g;
                h -= f * g;
                A(i, l) = f - g;
                f = 0;
                for (int64_t j = 0; j <= l; ++j) {
                    g = 0;
                    for (int64_t k = 0; k <= j; ++k) g += A(j, k) * A(i, k);
                    for (int64_t k = j + 1; k <= l; ++k) g += A(k, j) * A(i, k);
                    e[static_cast<size_t>(j)] = g / h;
                    f += e[static_cast<size_t>(j)] * A(i, j);
                }
                const double hh = f / (h + h);
                for (int64_t j = 0; j <= l; ++j) {
                    f = A(i, j);
                    e[static_cast<size_t>(j)] = g = e[static_cast<size_t>(j)] - hh * f;
                    for (int64_t k = 0; k <= j; ++k)
                        A(j, k) -= f * e[static_cast<size_t>(k)] + g * A(i, k);
                }
            }
        } else {
            e[static_cast<size_t>(i)] = A(i, l);
        }
        d[static_cast<size_t>(i)] = h;
    }
    e[0] = 0.0;
    for (int64_t i = 0; i < n; ++i) d[static_cast<size_t>(i)] = A(i, i);

    // implicit-shift QL on the tridiagonal (d, e)
    for (int64_t i = 1; i < n; ++i) e[static_cast<size_t>(i - 1)] = e[static_cast<size_t>(i)];
    e[static_cast<size_t>(n - 1)] = 0.0;
    for (int64_t l = 0; l < n; ++l) {
        int64_t iter = 0;
        int64_t m;
        do {
            for (m = l; m < n - 1; ++m) {
                const double dd = std::fabs(d[static_cast<size_t>(m)]) + std::fabs(d[static_cast<size_t>(m + 1)]);
                if (std::fabs(e[static_cast<size_t>(m)]) <= 1e-300 + 2.3e-16 * dd) break;
            }
            if (m != l) {
                if (++iter > 60) throw NumericError("sym_eigenvalues: QL failed to converge");
                double g = (d[static_cast<size_t>(l + 1)] - d[static_cast<size_t>(l)]) /
                           (2.0 * e[static_cast<size_t>(l)]);
                double r = std::hypot(g, 1.0);
                g = d[static_cast<size_t>(m)] - d[static_cast<size_t>(l)] +
                    e[static_cast<size_t>(l)] / (g + (g >= 0 ? std::fabs(r) : -std::fabs(r)));
                double s = 1.0, c = 1.0, p = 0.0;
                for (int64_t i = m - 1; i >= l; --i) {
                    double f = s * e[static_cast<size_t>(i)];
                    const double b = c * e[static_cast<size_t>(i)];
                    r = std::hypot(f, g);
                    e[static_cast<size_t>(i + 1)] = r;
                    if (r == 0.0) {
                        d[static_cast<size_t>(i + 1)] -= p;
                        e[static_cast<size_t>(m)] = 0.0;
                        break;
                    }
                    s = f / r;
                    c = g / r;
                    g = d[static_cast<size_t>(i + 1)] - p;
                    r = (d[static_cast<size_t>(i)] - g) * s + 2.0 * c * b;
                    p = s * r;
                    d[static_cast<size_t>(i + 1)] = g + p;
                    g = c * r - b;
                }
                if (r == 0.0 && m - 1 >= l) continue;
                d[static_cast<size_t>(l)] -= p;
                e[static_cast<size_t>(l)] = g;
                e[static_cast<size_t>(m)] = 0.0;
            }
        } while (m != l);
    }
    std::sort(d.begin(), d.end());
    return d;
}

void BlockFeatureDump::save(const std::string& path) const {
    TensorArchive ar;
    ar.manifest["kind"] = "features";
    ar.manifest["format_version"] = 1;
    ar.manifest["depth"] = depth;
    ar.manifest["samples"] = samples;
    ar.manifest["tokens"] = tokens;
    ar.manifest["dim"] = dim;
    ar.manifest["model_hash"] = model_hash;
    ar.manifest["dataset_id"] = dataset_id;
    for (int64_t b = 0; b < depth; ++b) {
        ar.add("blocks." + std::to_string(b) + ".patch", patch_feats[static_cast<size_t>(b)]);
        ar.add("blocks." + std::to_string(b) + ".cls", cls_feats[static_cast<size_t>(b)]);
    }
    ar.save(path);
}

BlockFeatureDump BlockFeatureDump::load(const std::string& path) {
    TensorArchive ar = TensorArchive::load(path);
    if (ar.manifest.value("kind", "") != "features")
        throw DataError("'" + path + "' is not a feature dump");
    BlockFeatureDump d;
    d.depth = ar.manifest.at("depth").get<int64_t>();
    d.samples = ar.manifest.at("samples").get<int64_t>();
    d.tokens = ar.manifest.at("tokens").get<int64_t>();
    d.dim = ar.manifest.at("dim").get<int64_t>();
    d.model_hash = ar.manifest.value("model_hash", uint64_t{0});
    d.dataset_id = ar.manifest.value("dataset_id", "");
    for (int64_t b = 0; b < d.depth; ++b) {
        const Tensor* p = ar.find("blocks." + std::to_string(b) + ".patch");
        const Tensor* c = ar.find("blocks." + std::to_string(b) + ".cls");
        if (!p || !c) throw DataError("'" + path + "': missing block " + std::to_string(b));
        d.patch_feats.push_back(*p);
        d.cls_feats.push_back(*c);
    }
    return d;
}

BlockFeatureDump collect_features(const ViTModel& model, const Tensor& images, int64_t max_samples) {
    NoGrad ng;
    Tensor batch = images;
    if (max_samples > 0 && images.dim(0) > max_samples) batch = op::slice(images, 0, 0, max_samples);
    ForwardOptions opts;
    opts.collect = Collect::all_blocks;
    ForwardResult res = vit_forward(model, batch, opts);
    BlockFeatureDump dump;
    dump.depth = model.config.depth;
    dump.samples = batch.dim(0);
    dump.tokens = res.patches.dim(1);
    dump.dim = model.config.dim;
    dump.model_hash = model_hash(model);
    for (int64_t b = 0; b < dump.depth; ++b) {
        dump.patch_feats.push_back(res.all_patches[static_cast<size_t>(b)]);
        dump.cls_feats.push_back(res.all_cls[static_cast<size_t>(b)]);
    }
    return dump;
}

SpectralReport block_spectra(const BlockFeatureDump& dump, int64_t top_k) {
    SpectralReport report;
    for (int64_t b = 0; b < dump.depth; ++b) {
        const Tensor& feats = dump.patch_feats[static_cast<size_t>(b)];
        const int64_t rows = feats.dim(0) * feats.dim(1);
        const int64_t d = feats.dim(2);
        // column means
        std::vector<double> mean(static_cast<size_t>(d), 0.0);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += feats.at(r * d + j);
        for (double& m : mean) m /= static_cast<double>(rows);
        // covariance
        std::vector<double> cov(static_cast<size_t>(d * d), 0.0);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < d; ++i) {
                const double ci = feats.at(r * d + i) - mean[static_cast<size_t>(i)];
                for (int64_t j = i; j < d; ++j) {
                    const double cj = feats.at(r * d + j) - mean[static_cast<size_t>(j)];
                    cov[static_cast<size_t>(i * d + j)] += ci * cj;
                }
            }
        const double denom = rows > 1 ? static_cast<double>(rows - 1) : 1.0;
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = i; j < d; ++j) {
                cov[static_cast<size_t>(i * d + j)] /= denom;
                cov[static_cast<size_t>(j * d + i)] = cov[static_cast<size_t>(i * d + j)];
            }
        if (rows < d)
            for (int64_t i = 0; i < d; ++i) cov[static_cast<size_t>(i * d + i)] += 1e-6;  // shrinkage
        std::vector<double> eig = sym_eigenvalues(std::move(cov), d);
        SpectralReport::BlockSpectrum spec;
        double mu = 0;
        for (double v : eig) mu += v;
        mu /= static_cast<double>(d);
        double var = 0;
        for (double v : eig) var += (v - mu) * (v - mu);
        var /= static_cast<double>(d);
        spec.mean_eigenvalue = mu;
        spec.eigenvalue_variance = var;
        for (int64_t i = 0; i < std::min<int64_t>(top_k, d); ++i)
            spec.top.push_back(eig[static_cast<size_t>(d - 1 - i)]);
        report.blocks.push_back(std::move(spec));
    }
    return report;
}

namespace {

// column standardization fitted on the training rows
struct Standardizer {
    std::vector<double> mean, scale;

    static Standardizer fit(const Tensor& x) {
        const int64_t n = x.dim(0), f = x.dim(1);
        Standardizer s;
        s.mean.assign(static_cast<size_t>(f), 0.0);
        s.scale.assign(static_cast<size_t>(f), 1.0);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < f; ++j) s.mean[static_cast<size_t>(j)] += x.at(i * f + j);
        for (double& m : s.mean) m /= static_cast<double>(n);
        std::vector<double> var(static_cast<size_t>(f), 0.0);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < f; ++j) {
                const double c = x.at(i * f + j) - s.mean[static_cast<size_t>(j)];
                var[static_cast<size_t>(j)] += c * c;
            }
        for (int64_t j = 0; j < f; ++j)
            s.scale[static_cast<size_t>(j)] =
                1.0 / std::sqrt(var[static_cast<size_t>(j)] / static_cast<double>(n) + 1e-8);
        return s;
    }

    Tensor apply(const Tensor& x) const {
        const int64_t n = x.dim(0), f = x.dim(1);
        Tensor out = Tensor::zeros({n, f}, DType::f32);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < f; ++j)
                out.set(i * f + j, (x.at(i * f + j) - mean[static_cast<size_t>(j)]) *
                                       scale[static_cast<size_t>(j)]);
        return out;
    }
};

double accuracy_of(const Tensor& logits, const std::vector<int64_t>& labels) {
    const int64_t n = logits.dim(0), c = logits.dim(1);
    int64_t hits = 0;
    for (int64_t i = 0; i < n; ++i) {
        int64_t best = 0;
        double best_v = logits.at(i * c);
        for (int64_t j = 1; j < c; ++j)
            if (logits.at(i * c + j) > best_v) {
                best_v = logits.at(i * c + j);
                best = j;
            }
        if (best == labels[static_cast<size_t>(i)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

} // namespace

ProbeHead train_logistic_head(const Tensor& x_train, const std::vector<int64_t>& y_train,
                              const Tensor& x_val, const std::vector<int64_t>& y_val, int64_t classes,
                              const ProbeConfig& cfg) {
    if (x_train.rank() != 2 || x_val.rank() != 2) throw ShapeError("train_logistic_head: features must be 2-D");
    if (classes < 2) throw ContractError("train_logistic_head: need at least two classes");
    if (x_train.dim(0) < 2) throw DataError("train_logistic_head: need at least two training samples");
    const int64_t f = x_train.dim(1);
    const Standardizer st = Standardizer::fit(x_train);
    Tensor xt = st.apply(x_train);
    Tensor xv = st.apply(x_val);

    Rng rng(cfg.seed);
    Tensor w = Tensor::randn({f, classes}, rng, 0.01, DType::f32);
    Tensor b = Tensor::zeros({classes}, DType::f32);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    OptimizerState opt;
    AdamWConfig adamw;
    adamw.weight_decay = cfg.weight_decay;
    std::vector<NamedParam> params{{"w", w}, {"b", b}};
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Tape tape;
        Tensor logits = op::add(op::matmul(xt, w), b);
        Tensor loss = op::softmax_cross_entropy(logits, y_train);
        tape.backward(loss);
        adamw_step(params, opt, cfg.lr, adamw);
        zero_grads(params);
    }
    ProbeHead head;
    head.weight = w;
    head.bias = b;
    {
        NoGrad ng;
        Tensor logits = op::add(op::matmul(xv, w), b);
        head.accuracy = accuracy_of(logits, y_val);
    }
    return head;
}

namespace {

// deterministic train/val row split
std::pair<std::vector<int64_t>, std::vector<int64_t>> split_rows(int64_t n, double train_fraction,
                                                                 uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x5917));
    std::vector<int64_t> order = rng.permutation(n);
    const int64_t n_train = std::max<int64_t>(1, static_cast<int64_t>(train_fraction * static_cast<double>(n)));
    std::vector<int64_t> train(order.begin(), order.begin() + std::min(n_train, n - 1));
    std::vector<int64_t> val(order.begin() + std::min(n_train, n - 1), order.end());
    return {train, val};
}

Tensor rows_subset(const Tensor& x, const std::vector<int64_t>& idx) {
    NoGrad ng;
    return op::index_select(x, 0, idx);
}

} // namespace

double position_probe(const BlockFeatureDump& dump, int64_t block, const ProbeConfig& cfg) {
    if (block < 1 || block > dump.depth) throw ContractError("position_probe: block out of range");
    if (dump.tokens < 2) throw ContractError("position_probe: need at least two patch positions");
    if (dump.samples < 2) throw DataError("position_probe: need at least two samples");
    const Tensor& feats = dump.patch_feats[static_cast<size_t>(block - 1)];
    const int64_t s = feats.dim(0), n = feats.dim(1), d = feats.dim(2);
    Tensor x;
    {
        NoGrad ng;
        x = op::reshape(feats, {s * n, d});
    }
    std::vector<int64_t> y(static_cast<size_t>(s * n));
    for (int64_t i = 0; i < s; ++i)
        for (int64_t j = 0; j < n; ++j) y[static_cast<size_t>(i * n + j)] = j;
    auto [tr, va] = split_rows(s * n, cfg.train_fraction, cfg.seed);
    std::vector<int64_t> ytr, yva;
    for (int64_t i : tr) ytr.push_back(y[static_cast<size_t>(i)]);
    for (int64_t i : va) yva.push_back(y[static_cast<size_t>(i)]);
    return train_logistic_head(rows_subset(x, tr), ytr, rows_subset(x, va), yva, n, cfg).accuracy;
}

double class_probe(const BlockFeatureDump& dump, int64_t block, const std::vector<int64_t>& labels,
                   int64_t classes, const ProbeConfig& cfg) {
    if (block < 1 || block > dump.depth) throw ContractError("class_probe: block out of range");
    if (static_cast<int64_t>(labels.size()) != dump.samples)
        throw ShapeError("class_probe: label count mismatch");
    if (dump.samples < 2) throw DataError("class_probe: need at least two samples");
    const Tensor& feats = dump.patch_feats[static_cast<size_t>(block - 1)];
    Tensor x;
    {
        NoGrad ng;
        x = op::mean_axis(feats, 1);  // [S, d]
    }
    auto [tr, va] = split_rows(dump.samples, cfg.train_fraction, cfg.seed);
    std::vector<int64_t> ytr, yva;
    for (int64_t i : tr) ytr.push_back(labels[static_cast<size_t>(i)]);
    for (int64_t i : va) yva.push_back(labels[static_cast<size_t>(i)]);
    return train_logistic_head(rows_subset(x, tr), ytr, rows_subset(x, va), yva, classes, cfg).accuracy;
}

std::vector<int64_t> recommend_unfreeze(const SpectralReport& spectra, int64_t k) {
    const int64_t depth = static_cast<int64_t>(spectra.blocks.size());
    if (k < 0 || k > depth) throw ContractError("recommend_unfreeze: k must lie in [0, depth]");
    std::vector<int64_t> order(static_cast<size_t>(depth));
    for (int64_t i = 0; i < depth; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        const double ma = spectra.blocks[static_cast<size_t>(a)].mean_eigenvalue;
        const double mb = spectra.blocks[static_cast<size_t>(b)].mean_eigenvalue;
        if (ma != mb) return ma < mb;
        return a > b;  // tie: deeper block first
    });
    std::vector<int64_t> out;
    for (int64_t i = 0; i < k; ++i) out.push_back(order[static_cast<size_t>(i)] + 1);
    return out;
}

std::string FeatureSpec::str() const {
    return std::string(last_n == 1 ? "last1" : "last" + std::to_string(last_n) + "_concat") + "/" +
           (use_cls ? "cls" : "meanpool");
}

Tensor extract_features(const ViTModel& model, const Tensor& images, const FeatureSpec& spec) {
    if (spec.last_n < 1 || spec.last_n > model.config.depth)
        throw ContractError("extract_features: last_n out of range");
    NoGrad ng;
    ForwardOptions opts;
    opts.collect = spec.last_n == 1 ? Collect::final_only : Collect::all_blocks;
    ForwardResult res = vit_forward(model, images, opts);
    std::vector<Tensor> parts;
    for (int64_t i = 0; i < spec.last_n; ++i) {
        Tensor cls, patches;
        if (spec.last_n == 1) {
            cls = res.cls;
            patches = res.patches;
        } else {
            const size_t bi = res.all_cls.size() - 1 - static_cast<size_t>(i);
            cls = res.all_cls[bi];
            patches = res.all_patches[bi];
        }
        parts.push_back(spec.use_cls ? cls : op::mean_axis(patches, 1));
    }
    return parts.size() == 1 ? parts[0] : op::concat(parts, 1);
}

LinprobeGridResult evaluate_linprobe(const ViTModel& model, const Dataset& train, const Dataset& val,
                                     const std::vector<FeatureSpec>& specs,
                                     const std::vector<double>& lr_grid, const ProbeConfig& base) {
    if (specs.empty() || lr_grid.empty())
        throw ContractError("evaluate_linprobe: feature and lr grids must be non-empty");
    LinprobeGridResult out;
    out.best.accuracy = -1;
    for (const FeatureSpec& spec : specs) {
        Tensor xt = extract_features(model, train.images, spec);
        Tensor xv = extract_features(model, val.images, spec);
        for (double lr : lr_grid) {
            ProbeConfig cfg = base;
            cfg.lr = lr;
            ProbeHead head = train_logistic_head(xt, train.labels, xv, val.labels, train.classes, cfg);
            LinprobeCell cell{spec, lr, head.accuracy};
            out.cells.push_back(cell);
            if (cell.accuracy > out.best.accuracy) out.best = cell;
        }
    }
    return out;
}

} // namespace explora
