#include "explora/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace explora {

static_assert(std::endian::native == std::endian::little,
              "archive payloads are little-endian; big-endian hosts are unsupported");

uint64_t fnv1a64(std::span<const std::byte> bytes, uint64_t seed) {
    uint64_t h = seed;
    for (std::byte b : bytes) {
        h ^= static_cast<uint64_t>(b);
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t model_hash(const ViTModel& model) {
    const std::string cfg = config_to_json(model.config).dump();
    uint64_t h = fnv1a64({reinterpret_cast<const std::byte*>(cfg.data()), cfg.size()});
    for (const NamedParam& np : model.named_params()) {
        h = fnv1a64({reinterpret_cast<const std::byte*>(np.name.data()), np.name.size()}, h);
        h = fnv1a64(np.tensor.bytes(), h);
    }
    return h;
}

Json config_to_json(const ViTConfig& cfg) {
    Json j;
    j["image_size"] = cfg.image_size;
    j["patch_size"] = cfg.patch_size;
    j["in_channels"] = cfg.in_channels;
    j["channel_groups"] = cfg.channel_groups;
    j["depth"] = cfg.depth;
    j["dim"] = cfg.dim;
    j["heads"] = cfg.heads;
    j["mlp_ratio"] = cfg.mlp_ratio;
    j["dtype"] = dtype_name(cfg.dtype);
    return j;
}

ViTConfig config_from_json(const Json& j) {
    ViTConfig cfg;
    try {
        cfg.image_size = j.at("image_size").get<int64_t>();
        cfg.patch_size = j.at("patch_size").get<int64_t>();
        cfg.in_channels = j.at("in_channels").get<int64_t>();
        cfg.channel_groups = j.at("channel_groups").get<std::vector<std::vector<int64_t>>>();
        cfg.depth = j.at("depth").get<int64_t>();
        cfg.dim = j.at("dim").get<int64_t>();
        cfg.heads = j.at("heads").get<int64_t>();
        cfg.mlp_ratio = j.at("mlp_ratio").get<double>();
        cfg.dtype = dtype_from_name(j.at("dtype").get<std::string>());
    } catch (const Json::exception& e) {
        throw DataError(std::string("config_from_json: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

Json partition_to_json(const Partition& part) {
    Json j;
    j["unfrozen_blocks"] = std::vector<int64_t>(part.unfrozen_blocks.begin(), part.unfrozen_blocks.end());
    j["rank"] = part.rank;
    j["alpha"] = part.alpha;
    j["targets"] = targets_to_string(part.targets);
    j["norms_unfrozen"] = part.norms_unfrozen;
    j["extra_trainable"] =
        std::vector<std::string>(part.extra_trainable.begin(), part.extra_trainable.end());
    return j;
}

Partition partition_from_json(const Json& j) {
    Partition p;
    try {
        const auto blocks = j.at("unfrozen_blocks").get<std::vector<int64_t>>();
        p.unfrozen_blocks.insert(blocks.begin(), blocks.end());
        p.rank = j.at("rank").get<int64_t>();
        p.alpha = j.at("alpha").get<double>();
        const std::string tg = j.at("targets").get<std::string>();
        p.targets = tg.empty() ? std::set<Target>{} : targets_from_string(tg);
        p.norms_unfrozen = j.at("norms_unfrozen").get<bool>();
        const auto extra = j.at("extra_trainable").get<std::vector<std::string>>();
        p.extra_trainable.insert(extra.begin(), extra.end());
    } catch (const Json::exception& e) {
        throw DataError(std::string("partition_from_json: ") + e.what());
    }
    return p;
}

const Tensor* TensorArchive::find(const std::string& name) const {
    for (const NamedParam& e : entries)
        if (e.name == name) return &e.tensor;
    return nullptr;
}

void TensorArchive::save(const std::string& path) const {
    Json m = manifest;
    Json table = Json::array();
    uint64_t offset = 0;
    uint64_t checksum = 0xcbf29ce484222325ULL;
    for (const NamedParam& e : entries) {
        Json row;
        row["name"] = e.name;
        row["dtype"] = dtype_name(e.tensor.dtype());
        row["shape"] = e.tensor.shape();
        row["offset"] = offset;
        row["bytes"] = e.tensor.bytes().size();
        table.push_back(row);
        offset += e.tensor.bytes().size();
        checksum = fnv1a64(e.tensor.bytes(), checksum);
    }
    m["entries"] = table;
    m["payload_checksum"] = checksum;
    m["endianness"] = "little";
    const std::string text = m.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(kArchiveMagic, 8);
    const uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const NamedParam& e : entries)
        out.write(reinterpret_cast<const char*>(e.tensor.bytes().data()),
                  static_cast<std::streamsize>(e.tensor.bytes().size()));
    if (!out) throw IoError("write failed for '" + path + "'");
}

TensorArchive TensorArchive::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kArchiveMagic, 8) != 0)
        throw DataError("'" + path + "' is not an archive (bad magic)");
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    if (!in) throw DataError("'" + path + "': truncated manifest length");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw DataError("'" + path + "': truncated manifest");
    TensorArchive ar;
    try {
        ar.manifest = Json::parse(text);
    } catch (const Json::exception& e) {
        throw DataError("'" + path + "': manifest parse error: " + e.what());
    }
    if (!ar.manifest.contains("entries")) throw DataError("'" + path + "': manifest lacks entry table");
    uint64_t checksum = 0xcbf29ce484222325ULL;
    for (const Json& row : ar.manifest["entries"]) {
        std::string name;
        Shape shape;
        DType dt;
        uint64_t nbytes = 0;
        try {
            name = row.at("name").get<std::string>();
            shape = row.at("shape").get<Shape>();
            dt = dtype_from_name(row.at("dtype").get<std::string>());
            nbytes = row.at("bytes").get<uint64_t>();
        } catch (const Json::exception& e) {
            throw DataError("'" + path + "': malformed entry row: " + e.what());
        }
        Tensor t = make_tensor(shape, dt);
        if (t.bytes().size() != nbytes)
            throw DataError("'" + path + "': entry '" + name + "' size mismatch");
        in.read(reinterpret_cast<char*>(t.bytes().data()), static_cast<std::streamsize>(nbytes));
        if (!in) throw DataError("'" + path + "': truncated payload at '" + name + "'");
        checksum = fnv1a64(t.bytes(), checksum);
        ar.entries.push_back({name, t});
    }
    const uint64_t want = ar.manifest.value("payload_checksum", uint64_t{0});
    if (checksum != want)
        throw DataError("'" + path + "': payload checksum mismatch (file corrupt or tampered)");
    return ar;
}

void save_model(const ViTModel& model, const std::string& path, const Json& extra) {
    if (model.has_adapters())
        throw StateError("save_model: model still carries adapters; merge or extract a delta instead");
    TensorArchive ar;
    ar.manifest["kind"] = "model";
    ar.manifest["format_version"] = 1;
    ar.manifest["config"] = config_to_json(model.config);
    ar.manifest["weights_hash"] = model_hash(model);
    for (auto& [k, v] : extra.items()) ar.manifest[k] = v;
    for (const NamedParam& np : model.named_params()) ar.add(np.name, np.tensor);
    ar.save(path);
}

ViTModel load_model(const std::string& path) {
    TensorArchive ar = TensorArchive::load(path);
    if (ar.manifest.value("kind", "") != "model")
        throw DataError("'" + path + "' is not a model archive");
    const ViTConfig cfg = config_from_json(ar.manifest.at("config"));
    Rng scratch(0);
    ViTModel model = ViTModel::init(cfg, scratch);
    auto params = model.named_params();
    if (params.size() != ar.entries.size())
        throw CompatError("'" + path + "': parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].name != ar.entries[i].name)
            throw CompatError("'" + path + "': unexpected parameter '" + ar.entries[i].name + "'");
        Tensor dst = params[i].tensor;
        const Tensor& src = ar.entries[i].tensor;
        if (dst.shape() != src.shape() || dst.dtype() != src.dtype())
            throw CompatError("'" + path + "': shape mismatch for '" + params[i].name + "'");
        std::memcpy(dst.bytes().data(), src.bytes().data(), src.bytes().size());
    }
    model.set_all_requires_grad(false);
    return model;
}

} // namespace explora
