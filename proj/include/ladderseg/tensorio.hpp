#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ladderseg/common.hpp"
#include "ladderseg/tensor.hpp"

namespace ladderseg {

enum class DType : uint32_t { f32 = 0, u8 = 1, i64 = 2 };

size_t dtype_size(DType dt);
const char* dtype_name(DType dt);
DType dtype_from_name(const std::string& name);

// One named tensor: raw little-endian row-major bytes plus descriptor.
struct TensorRecord {
    DType dtype = DType::f32;
    Shape shape;
    std::vector<uint8_t> bytes;
    bool frozen = false;
    bool buffer = false;  // mutable state updated outside the optimizer (e.g. BN stats)

    int64_t numel() const { return shape_numel(shape); }
};

TensorRecord record_from_f32(const Tensor<float>& t, bool frozen, bool buffer = false);
TensorRecord record_from_u8(const Tensor<uint8_t>& t);
Tensor<float> record_to_f32(const TensorRecord& r);
Tensor<uint8_t> record_to_u8(const TensorRecord& r);

// Named tensors in canonical (lexicographic) order. The order is normative:
// frozen_digest depends on it.
class ParameterStore {
public:
    void put(const std::string& name, TensorRecord rec);
    bool contains(const std::string& name) const { return entries_.count(name) > 0; }
    const TensorRecord& get(const std::string& name) const;
    TensorRecord& get(const std::string& name);
    size_t size() const { return entries_.size(); }
    int64_t total_params() const;

    const std::map<std::string, TensorRecord>& entries() const { return entries_; }
    std::map<std::string, TensorRecord>& entries() { return entries_; }

    bool operator==(const ParameterStore& o) const;

private:
    std::map<std::string, TensorRecord> entries_;
};

// SHA-256 over the concatenated bytes of frozen-flagged tensors in canonical
// order. Zero frozen tensors digests the empty byte string.
std::string frozen_digest(const ParameterStore& store);

// Raw blob file: 8-byte magic, u32 dtype tag, u32 rank, u64 dims, payload.
void write_blob(const std::filesystem::path& path, const TensorRecord& rec);
TensorRecord read_blob(const std::filesystem::path& path);

// Checkpoint directory: manifest.json + tensors/<name>.bin. Reload-then-save
// is byte-identical.
void save_checkpoint(const std::filesystem::path& dir, const ParameterStore& store,
                     const nlohmann::json& metadata);
std::pair<ParameterStore, nlohmann::json> load_checkpoint(const std::filesystem::path& dir);

}  // namespace ladderseg
