#pragma once

#include <string>
#include <vector>

#include "explora/archive.hpp"
#include "explora/tensor.hpp"

namespace explora {

struct Dataset {
    Tensor images;  // [n, C, H, W] float32
    std::vector<int64_t> labels;
    int64_t classes = 0;
    std::vector<std::string> label_names;

    int64_t size() const { return images.defined() ? images.dim(0) : 0; }
    Tensor batch(const std::vector<int64_t>& indices) const;
    Dataset take(int64_t n) const;  // first n samples
};

// Procedural domain-shift benchmark. Classes are shape families (identical in
// every domain); the target domains add a fixed invertible channel mixing, a
// texture frequency-band move and a mild nonlinear brightness law so that
// source-trained features degrade measurably while no information is lost.
struct SyntheticDomainSpec {
    std::string domain = "source_rgb";  // source_rgb | target_spectral | target_multispectral
    int64_t classes = 4;
    int64_t image_size = 32;
    int64_t channels = 3;  // 6 for target_multispectral
    uint64_t seed = 0;

    void validate() const;
};

struct DatasetManifest {
    std::string root;
    Json doc;  // parsed manifest.json

    int64_t classes() const { return doc.at("classes").get<int64_t>(); }
    int64_t image_size() const { return doc.at("image_size").get<int64_t>(); }
    int64_t channels() const { return doc.at("channels").get<int64_t>(); }
};

DatasetManifest gen_data(const SyntheticDomainSpec& spec, int64_t n_train, int64_t n_val,
                         const std::string& out_dir);

// One-subdirectory-per-class ingestion of binary portable pixmaps (P6) and
// portable graymaps (P5). The shorter side is resized to image_size, then a
// center crop is taken. Labels follow lexicographic directory order.
DatasetManifest ingest_folder(const std::string& path, int64_t image_size, const std::string& out_dir);

DatasetManifest load_manifest(const std::string& dir);
Dataset load_split(const std::string& dir, const std::string& split);  // "train" | "val"

// single-image synthesis, exposed for tests; index seeds the per-image stream
Tensor synth_image(const SyntheticDomainSpec& spec, int64_t index, int64_t* label_out = nullptr);

} // namespace explora
