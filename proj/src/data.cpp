#include "explora/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <fstream>
#include <numbers>
#include <thread>

#include "explora/objectives.hpp"

namespace explora {

namespace fs = std::filesystem;

Tensor Dataset::batch(const std::vector<int64_t>& indices) const {
    return ops::index_select(images, 0, indices);
}

Dataset Dataset::take(int64_t n) const {
    if (n >= size()) return *this;
    Dataset out;
    out.images = ops::slice(images, 0, 0, n);
    out.labels.assign(labels.begin(), labels.begin() + n);
    out.classes = classes;
    out.label_names = label_names;
    return out;
}

void SyntheticDomainSpec::validate() const {
    if (domain != "source_rgb" && domain != "target_spectral" && domain != "target_multispectral")
        throw ContractError("SyntheticDomainSpec: unknown domain '" + domain + "'");
    if (classes < 2 || classes > 8) throw ContractError("SyntheticDomainSpec: classes must lie in [2, 8]");
    if (image_size < 16) throw ContractError("SyntheticDomainSpec: image_size must be >= 16");
    const int64_t want_channels = domain == "target_multispectral" ? 6 : 3;
    if (channels != want_channels)
        throw ContractError("SyntheticDomainSpec: domain '" + domain + "' uses " +
                            std::to_string(want_channels) + " channels");
}

namespace {

// fixed 3x3 orthogonal channel mixer shared by every target dataset; built
// once from a domain constant so different dataset seeds see the same shift
const double kTargetMixer[3][3] = {
    // Gram-Schmidt of a fixed seeded gaussian draw, hard-coded for stability
    {0.21514639419099386, -0.76889135024668, 0.6020549821854098},
    {0.72346448754792549, -0.29009587959071, -0.62899196776288},
    {0.65830662981089314, 0.57089918664486, 0.49387864084374},
};

double brightness_law(double x) {
    // invertible odd nonlinearity: monotone, preserves information
    return 1.15 * x + 0.3 * x * x * x;
}

struct ShapeParams {
    double cx, cy;      // center in [0,1]
    double radius;      // fraction of image
    double angle;       // orientation
    double intensity;   // additive strength
    double color[3];    // per-channel weights
};

double shape_mask(int64_t cls, const ShapeParams& sp, double x, double y) {
    // x, y in [0,1]; returns 1 inside the figure
    const double dx = x - sp.cx, dy = y - sp.cy;
    const double ca = std::cos(sp.angle), sa = std::sin(sp.angle);
    const double rx = ca * dx + sa * dy;
    const double ry = -sa * dx + ca * dy;
    switch (cls % 4) {
        case 0:  // filled disk
            return (dx * dx + dy * dy <= sp.radius * sp.radius) ? 1.0 : 0.0;
        case 1: {  // square outline
            const double ax = std::fabs(rx), ay = std::fabs(ry);
            const double r = sp.radius, t = 0.35 * sp.radius;
            return (std::max(ax, ay) <= r && std::max(ax, ay) >= r - t) ? 1.0 : 0.0;
        }
        case 2: {  // plus / cross
            const double arm = 0.35 * sp.radius;
            return ((std::fabs(rx) <= arm && std::fabs(ry) <= sp.radius) ||
                    (std::fabs(ry) <= arm && std::fabs(rx) <= sp.radius))
                       ? 1.0
                       : 0.0;
        }
        default: {  // checkerboard patch
            if (std::max(std::fabs(rx), std::fabs(ry)) > sp.radius) return 0.0;
            const double cell = sp.radius / 1.5;
            const int ix = static_cast<int>(std::floor(rx / cell));
            const int iy = static_cast<int>(std::floor(ry / cell));
            return ((ix + iy) & 1) ? 1.0 : 0.0;
        }
    }
}

} // namespace

Tensor synth_image(const SyntheticDomainSpec& spec, int64_t index, int64_t* label_out) {
    spec.validate();
    Rng rng(Rng::derive(spec.seed, static_cast<uint64_t>(index)));
    const int64_t s = spec.image_size;
    const int64_t cls = index % spec.classes;
    if (label_out) *label_out = cls;

    const bool target = spec.domain != "source_rgb";
    // texture band: cycles per image
    const double f_lo = target ? 3.5 : 1.5;
    const double f_hi = target ? 6.5 : 3.0;

    // two oriented gratings + per-channel gains
    struct Grating {
        double f, theta, phase, amp;
    } gr[2];
    for (Grating& g : gr) {
        g.f = rng.uniform(f_lo, f_hi);
        g.theta = rng.uniform(0.0, std::numbers::pi);
        g.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        g.amp = rng.uniform(0.2, 0.4);
    }
    double chan_gain[3];
    for (double& c : chan_gain) c = rng.uniform(0.5, 1.0);

    ShapeParams sp;
    sp.cx = 0.5 + rng.uniform(-0.12, 0.12);
    sp.cy = 0.5 + rng.uniform(-0.12, 0.12);
    sp.radius = rng.uniform(0.18, 0.30);
    sp.angle = rng.uniform(-0.3, 0.3);
    sp.intensity = rng.uniform(0.9, 1.3);
    for (double& c : sp.color) c = rng.uniform(0.55, 1.0);

    // base RGB field
    std::vector<double> rgb(static_cast<size_t>(3 * s * s));
    for (int64_t y = 0; y < s; ++y)
        for (int64_t x = 0; x < s; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(s);
            const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(s);
            double tex = 0;
            for (const Grating& g : gr) {
                const double t = u * std::cos(g.theta) + v * std::sin(g.theta);
                tex += g.amp * std::sin(2.0 * std::numbers::pi * g.f * t + g.phase);
            }
            const double mask = shape_mask(cls, sp, u, v);
            for (int64_t c = 0; c < 3; ++c) {
                double val = chan_gain[c] * tex + mask * sp.intensity * sp.color[c];
                val += 0.05 * rng.normal();
                rgb[static_cast<size_t>((c * s + y) * s + x)] = val;
            }
        }

    if (target) {
        // brightness law, then the fixed orthogonal channel mixing
        for (double& v : rgb) v = brightness_law(v);
        for (int64_t y = 0; y < s; ++y)
            for (int64_t x = 0; x < s; ++x) {
                double in[3], out3[3];
                for (int64_t c = 0; c < 3; ++c) in[c] = rgb[static_cast<size_t>((c * s + y) * s + x)];
                for (int64_t c = 0; c < 3; ++c)
                    out3[c] = kTargetMixer[c][0] * in[0] + kTargetMixer[c][1] * in[1] +
                              kTargetMixer[c][2] * in[2];
                for (int64_t c = 0; c < 3; ++c) rgb[static_cast<size_t>((c * s + y) * s + x)] = out3[c];
            }
    }

    const int64_t channels = spec.channels;
    Tensor img = Tensor::zeros({channels, s, s}, DType::f32);
    if (channels == 3) {
        for (int64_t i = 0; i < 3 * s * s; ++i) img.set(i, rgb[static_cast<size_t>(i)]);
    } else {
        // multi-spectral bands: the three mixed bands plus three derived bands
        // (sums/differences through the same brightness law) — full-rank map
        for (int64_t y = 0; y < s; ++y)
            for (int64_t x = 0; x < s; ++x) {
                const double r = rgb[static_cast<size_t>((0 * s + y) * s + x)];
                const double g = rgb[static_cast<size_t>((1 * s + y) * s + x)];
                const double b = rgb[static_cast<size_t>((2 * s + y) * s + x)];
                const double bands[6] = {r,
                                         g,
                                         b,
                                         0.6 * (r + g) - 0.2 * b,
                                         0.6 * (g + b) - 0.2 * r,
                                         0.5 * (r - b) + 0.4 * g};
                for (int64_t c = 0; c < 6; ++c) img.set((c * s + y) * s + x, bands[c]);
            }
    }
    return img;
}

namespace {

struct SplitTensors {
    Tensor images;
    Tensor labels;
};

SplitTensors generate_split(const SyntheticDomainSpec& spec, int64_t offset, int64_t count) {
    const int64_t s = spec.image_size;
    Tensor images = Tensor::zeros({count, spec.channels, s, s}, DType::f32);
    Tensor labels = Tensor::zeros({count}, DType::f32);
    const int64_t per_image = spec.channels * s * s;

    int64_t workers = 1;
    if (const char* env = std::getenv("EXPLORA_THREADS")) workers = std::max<int64_t>(1, std::atoll(env));
    workers = std::min(workers, count);
    auto fill = [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            int64_t label = 0;
            Tensor img = synth_image(spec, offset + i, &label);
            std::memcpy(images.bytes().data() + static_cast<size_t>(i * per_image) * sizeof(float),
                        img.bytes().data(), img.bytes().size());
            labels.set(i, static_cast<double>(label));
        }
    };
    if (workers <= 1) {
        fill(0, count);
    } else {
        // per-image seed streams make the output independent of the sharding
        std::vector<std::thread> pool;
        const int64_t chunk = (count + workers - 1) / workers;
        for (int64_t w = 0; w < workers; ++w) {
            const int64_t lo = w * chunk, hi = std::min(count, lo + chunk);
            if (lo < hi) pool.emplace_back(fill, lo, hi);
        }
        for (std::thread& t : pool) t.join();
    }
    return {images, labels};
}

uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::vector<char> buf(1 << 16);
    uint64_t h = 0xcbf29ce484222325ULL;
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        const std::streamsize got = in.gcount();
        h = fnv1a64({reinterpret_cast<const std::byte*>(buf.data()), static_cast<size_t>(got)}, h);
    }
    return h;
}

void write_split_shard(const std::string& path, const SplitTensors& split, const Json& meta) {
    TensorArchive ar;
    ar.manifest["kind"] = "dataset";
    ar.manifest["format_version"] = 1;
    ar.manifest["meta"] = meta;
    ar.add("images", split.images);
    ar.add("labels", split.labels);
    ar.save(path);
}

DatasetManifest write_dataset(const std::string& out_dir, const Json& source_desc, int64_t classes,
                              int64_t image_size, int64_t channels,
                              const std::vector<std::string>& label_names, const SplitTensors& train,
                              const SplitTensors& val) {
    fs::create_directories(out_dir);
    Json meta;
    meta["classes"] = classes;
    meta["image_size"] = image_size;
    meta["channels"] = channels;
    write_split_shard(out_dir + "/train.shard", train, meta);
    write_split_shard(out_dir + "/val.shard", val, meta);

    Json doc;
    doc["format"] = "explora-dataset-v1";
    doc["source"] = source_desc;
    doc["classes"] = classes;
    doc["image_size"] = image_size;
    doc["channels"] = channels;
    doc["label_names"] = label_names;
    Json splits;
    splits["train"] = {{"file", "train.shard"},
                       {"count", train.images.dim(0)},
                       {"checksum", file_checksum(out_dir + "/train.shard")}};
    splits["val"] = {{"file", "val.shard"},
                     {"count", val.images.dim(0)},
                     {"checksum", file_checksum(out_dir + "/val.shard")}};
    doc["splits"] = splits;

    std::ofstream mf(out_dir + "/manifest.json", std::ios::trunc);
    if (!mf) throw IoError("cannot write '" + out_dir + "/manifest.json'");
    mf << doc.dump(2) << "\n";

    DatasetManifest dm;
    dm.root = out_dir;
    dm.doc = doc;
    return dm;
}

} // namespace

DatasetManifest gen_data(const SyntheticDomainSpec& spec, int64_t n_train, int64_t n_val,
                         const std::string& out_dir) {
    spec.validate();
    if (n_train <= 0 || n_val <= 0) throw ContractError("gen_data: split sizes must be positive");
    SplitTensors train = generate_split(spec, 0, n_train);
    SplitTensors val = generate_split(spec, n_train, n_val);
    Json source;
    source["type"] = "synthetic";
    source["domain"] = spec.domain;
    source["seed"] = spec.seed;
    std::vector<std::string> names;
    for (int64_t c = 0; c < spec.classes; ++c) names.push_back("shape_" + std::to_string(c));
    return write_dataset(out_dir, source, spec.classes, spec.image_size, spec.channels, names, train,
                         val);
}

namespace {

// minimal binary PNM reader: P6 (rgb) and P5 (gray), 8-bit maxval
struct PnmImage {
    int64_t channels = 0, width = 0, height = 0;
    std::vector<uint8_t> pixels;  // interleaved
};

PnmImage read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string magic;
    in >> magic;
    PnmImage img;
    if (magic == "P6")
        img.channels = 3;
    else if (magic == "P5")
        img.channels = 1;
    else
        throw DataError("'" + path + "': unsupported format '" + magic + "' (want binary P5/P6)");
    auto next_int = [&](const char* what) {
        // skip whitespace and '#' comments
        for (;;) {
            const int c = in.peek();
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        int64_t v = 0;
        in >> v;
        if (!in) throw DataError("'" + path + "': malformed header (" + std::string(what) + ")");
        return v;
    };
    img.width = next_int("width");
    img.height = next_int("height");
    const int64_t maxval = next_int("maxval");
    if (maxval != 255) throw DataError("'" + path + "': only 8-bit images supported");
    in.get();  // single whitespace after maxval
    img.pixels.resize(static_cast<size_t>(img.channels * img.width * img.height));
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (!in) throw DataError("'" + path + "': truncated pixel data");
    return img;
}

Tensor pnm_to_tensor(const PnmImage& img, int64_t out_size) {
    // planar float in [-1, 1]
    Tensor t = Tensor::zeros({img.channels, img.height, img.width}, DType::f32);
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t x = 0; x < img.width; ++x)
            for (int64_t c = 0; c < img.channels; ++c) {
                const uint8_t v =
                    img.pixels[static_cast<size_t>((y * img.width + x) * img.channels + c)];
                t.set((c * img.height + y) * img.width + x, static_cast<double>(v) / 127.5 - 1.0);
            }
    // resize shorter side to out_size, then center crop
    const double scale = static_cast<double>(out_size) /
                         static_cast<double>(std::min(img.height, img.width));
    const int64_t rh = std::max<int64_t>(out_size, static_cast<int64_t>(std::lround(img.height * scale)));
    const int64_t rw = std::max<int64_t>(out_size, static_cast<int64_t>(std::lround(img.width * scale)));
    Tensor resized = bicubic_resize(t, rh, rw);
    const int64_t oy = (rh - out_size) / 2, ox = (rw - out_size) / 2;
    Tensor out = Tensor::zeros({img.channels, out_size, out_size}, DType::f32);
    for (int64_t c = 0; c < img.channels; ++c)
        for (int64_t y = 0; y < out_size; ++y)
            for (int64_t x = 0; x < out_size; ++x)
                out.set((c * out_size + y) * out_size + x,
                        resized.at((c * rh + oy + y) * rw + ox + x));
    return out;
}

} // namespace

DatasetManifest ingest_folder(const std::string& path, int64_t image_size, const std::string& out_dir) {
    if (!fs::is_directory(path)) throw DataError("ingest_folder: '" + path + "' is not a directory");
    std::vector<std::string> class_dirs;
    for (const auto& e : fs::directory_iterator(path))
        if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw DataError("ingest_folder: no class subdirectories in '" + path + "'");

    std::vector<std::pair<std::string, int64_t>> files;  // path, label
    for (size_t li = 0; li < class_dirs.size(); ++li) {
        std::vector<std::string> names;
        for (const auto& e : fs::directory_iterator(path + "/" + class_dirs[li]))
            if (e.is_regular_file()) names.push_back(e.path().string());
        std::sort(names.begin(), names.end());
        for (const std::string& n : names) files.emplace_back(n, static_cast<int64_t>(li));
    }
    if (files.empty()) throw DataError("ingest_folder: no image files under '" + path + "'");

    std::vector<Tensor> tensors;
    std::vector<int64_t> file_channels;
    for (const auto& [file, label] : files) {
        PnmImage img = read_pnm(file);
        file_channels.push_back(img.channels);
        tensors.push_back(pnm_to_tensor(img, image_size));
    }
    // mixed channel counts: report the minority as the offenders
    std::map<int64_t, int64_t> freq;
    for (int64_t c : file_channels) freq[c]++;
    if (freq.size() > 1) {
        int64_t majority = file_channels[0];
        for (const auto& [c, n] : freq)
            if (n > freq[majority]) majority = c;
        std::string list;
        for (size_t i = 0; i < files.size(); ++i)
            if (file_channels[i] != majority)
                list += "\n  " + files[i].first + " (" + std::to_string(file_channels[i]) + " channels)";
        throw DataError("ingest_folder: mixed channel counts; offending files:" + list);
    }
    const int64_t channels = file_channels[0];

    const int64_t n = static_cast<int64_t>(files.size());
    SplitTensors all;
    all.images = Tensor::zeros({n, channels, image_size, image_size}, DType::f32);
    all.labels = Tensor::zeros({n}, DType::f32);
    const int64_t per = channels * image_size * image_size;
    for (int64_t i = 0; i < n; ++i) {
        std::memcpy(all.images.bytes().data() + static_cast<size_t>(i * per) * sizeof(float),
                    tensors[static_cast<size_t>(i)].bytes().data(),
                    tensors[static_cast<size_t>(i)].bytes().size());
        all.labels.set(i, static_cast<double>(files[static_cast<size_t>(i)].second));
    }
    Json source;
    source["type"] = "ingested";
    source["path"] = path;
    // single split: everything lands in train; val reuses it (callers may, and
    // the CLI does, split downstream)
    return write_dataset(out_dir, source, static_cast<int64_t>(class_dirs.size()), image_size, channels,
                         class_dirs, all, all);
}

DatasetManifest load_manifest(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw IoError("cannot open '" + dir + "/manifest.json'");
    DatasetManifest dm;
    dm.root = dir;
    try {
        in >> dm.doc;
    } catch (const Json::exception& e) {
        throw DataError("manifest parse error: " + std::string(e.what()));
    }
    if (dm.doc.value("format", "") != "explora-dataset-v1")
        throw DataError("'" + dir + "': not an explora dataset");
    return dm;
}

Dataset load_split(const std::string& dir, const std::string& split) {
    DatasetManifest dm = load_manifest(dir);
    if (!dm.doc.at("splits").contains(split))
        throw DataError("dataset '" + dir + "' has no split '" + split + "'");
    const Json& s = dm.doc.at("splits").at(split);
    const std::string file = dir + "/" + s.at("file").get<std::string>();
    const uint64_t want = s.at("checksum").get<uint64_t>();
    const uint64_t got = file_checksum(file);
    if (want != got)
        throw DataError("dataset shard '" + file + "' checksum mismatch (corrupt or modified)");
    TensorArchive ar = TensorArchive::load(file);
    const Tensor* images = ar.find("images");
    const Tensor* labels = ar.find("labels");
    if (!images || !labels) throw DataError("dataset shard '" + file + "' lacks images/labels");
    Dataset ds;
    ds.images = *images;
    ds.classes = dm.classes();
    for (int64_t i = 0; i < labels->numel(); ++i)
        ds.labels.push_back(static_cast<int64_t>(std::llround(labels->at(i))));
    ds.label_names = dm.doc.value("label_names", std::vector<std::string>{});
    return ds;
}

} // namespace explora
