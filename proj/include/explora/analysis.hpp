#pragma once

#include <string>
#include <vector>

#include "explora/archive.hpp"
#include "explora/data.hpp"
#include "explora/vit.hpp"

namespace explora {

// eigenvalues of a dense symmetric matrix (row-major, n x n), ascending;
// Householder tridiagonalization followed by implicit-shift QL
std::vector<double> sym_eigenvalues(std::vector<double> a, int64_t n);

struct BlockFeatureDump {
    int64_t depth = 0, samples = 0, tokens = 0, dim = 0;
    std::vector<Tensor> patch_feats;  // per block [S, N, d]
    std::vector<Tensor> cls_feats;    // per block [S, d]
    uint64_t model_hash = 0;
    std::string dataset_id;

    void save(const std::string& path) const;
    static BlockFeatureDump load(const std::string& path);
};

BlockFeatureDump collect_features(const ViTModel& model, const Tensor& images, int64_t max_samples = 0);

struct SpectralReport {
    struct BlockSpectrum {
        double mean_eigenvalue = 0;
        double eigenvalue_variance = 0;
        std::vector<double> top;  // descending
    };
    std::vector<BlockSpectrum> blocks;
};

// Per block: flatten patch tokens to rows, center, covariance eigenvalues.
// When rows < dim a 1e-6 ridge keeps the problem well-posed.
SpectralReport block_spectra(const BlockFeatureDump& dump, int64_t top_k = 8);

struct ProbeConfig {
    int64_t epochs = 100;  // full-batch passes
    double lr = 0.1;
    double weight_decay = 1e-4;
    double train_fraction = 0.8;
    uint64_t seed = 0;
};

struct ProbeHead {
    Tensor weight;  // [f, classes]
    Tensor bias;    // [classes]
    double accuracy = 0;
};

// Multinomial logistic regression on standardized features, trained full-batch
// with the harness optimizer; returns held-out accuracy.
ProbeHead train_logistic_head(const Tensor& x_train, const std::vector<int64_t>& y_train,
                              const Tensor& x_val, const std::vector<int64_t>& y_val, int64_t classes,
                              const ProbeConfig& cfg);

// patch feature -> patch position, block is 1-indexed
double position_probe(const BlockFeatureDump& dump, int64_t block, const ProbeConfig& cfg = {});

// mean-pooled patch features -> image class
double class_probe(const BlockFeatureDump& dump, int64_t block, const std::vector<int64_t>& labels,
                   int64_t classes, const ProbeConfig& cfg = {});

// k block ids (1-indexed) with the lowest mean eigenvalue; ties prefer the
// deeper block
std::vector<int64_t> recommend_unfreeze(const SpectralReport& spectra, int64_t k);

struct FeatureSpec {
    int64_t last_n = 1;   // 1 or 4 (concatenated)
    bool use_cls = true;  // cls token vs mean-pooled patches

    std::string str() const;
};

struct LinprobeCell {
    FeatureSpec spec;
    double lr = 0;
    double accuracy = 0;
};

struct LinprobeGridResult {
    LinprobeCell best;
    std::vector<LinprobeCell> cells;
};

LinprobeGridResult evaluate_linprobe(const ViTModel& model, const Dataset& train, const Dataset& val,
                                     const std::vector<FeatureSpec>& specs,
                                     const std::vector<double>& lr_grid, const ProbeConfig& base = {});

// features for a dataset under a spec: [n, last_n * d]
Tensor extract_features(const ViTModel& model, const Tensor& images, const FeatureSpec& spec);

} // namespace explora
