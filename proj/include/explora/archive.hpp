#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "explora/peft.hpp"
#include "explora/vit.hpp"

namespace explora {

using Json = nlohmann::json;

uint64_t fnv1a64(std::span<const std::byte> bytes, uint64_t seed = 0xcbf29ce484222325ULL);

// hash over the canonical config json plus every parameter buffer, used to
// pair deltas with the base model they were trained from
uint64_t model_hash(const ViTModel& model);

Json config_to_json(const ViTConfig& cfg);
ViTConfig config_from_json(const Json& j);
Json partition_to_json(const Partition& part);
Partition partition_from_json(const Json& j);

// Named-tensor container with a JSON manifest. On disk:
//   8-byte magic "EXPL0001"
//   u64 little-endian manifest length
//   UTF-8 JSON manifest (augmented with the entry table and payload checksum)
//   raw little-endian IEEE-754 tensor payloads, row-major, back to back
struct TensorArchive {
    Json manifest;  // caller-owned fields; "entries"/"payload_checksum" are managed
    std::vector<NamedParam> entries;

    void add(const std::string& name, const Tensor& t) { entries.push_back({name, t}); }
    const Tensor* find(const std::string& name) const;

    void save(const std::string& path) const;
    static TensorArchive load(const std::string& path);
};

inline constexpr const char* kArchiveMagic = "EXPL0001";

// plain (adapter-free) model files
void save_model(const ViTModel& model, const std::string& path, const Json& extra = Json::object());
ViTModel load_model(const std::string& path);

} // namespace explora
