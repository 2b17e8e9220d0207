#include "ladderseg/tensorio.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ladderseg/digest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ladderseg {

namespace {

constexpr char kBlobMagic[8] = {'L', 'S', 'E', 'G', 'B', 'L', 'B', '1'};
constexpr const char* kManifestFormat = "ladderseg-checkpoint-v1";

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_pod(std::istream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return static_cast<bool>(is);
}

}  // namespace

size_t dtype_size(DType dt) {
    switch (dt) {
        case DType::f32: return 4;
        case DType::u8: return 1;
        case DType::i64: return 8;
    }
    throw ContractError("unsupported dtype tag " + std::to_string(static_cast<uint32_t>(dt)));
}

const char* dtype_name(DType dt) {
    switch (dt) {
        case DType::f32: return "f32";
        case DType::u8: return "u8";
        case DType::i64: return "i64";
    }
    throw ContractError("unsupported dtype tag " + std::to_string(static_cast<uint32_t>(dt)));
}

DType dtype_from_name(const std::string& name) {
    if (name == "f32") return DType::f32;
    if (name == "u8") return DType::u8;
    if (name == "i64") return DType::i64;
    throw ContractError("unsupported dtype: " + name);
}

TensorRecord record_from_f32(const Tensor<float>& t, bool frozen, bool buffer) {
    TensorRecord r;
    r.dtype = DType::f32;
    r.shape = t.shape;
    r.frozen = frozen;
    r.buffer = buffer;
    r.bytes.resize(t.data.size() * 4);
    std::memcpy(r.bytes.data(), t.data.data(), r.bytes.size());
    return r;
}

TensorRecord record_from_u8(const Tensor<uint8_t>& t) {
    TensorRecord r;
    r.dtype = DType::u8;
    r.shape = t.shape;
    r.bytes.assign(t.data.begin(), t.data.end());
    return r;
}

Tensor<float> record_to_f32(const TensorRecord& r) {
    if (r.dtype != DType::f32)
        throw ContractError(std::string("expected f32 tensor, got ") + dtype_name(r.dtype));
    Tensor<float> t(r.shape);
    std::memcpy(t.data.data(), r.bytes.data(), r.bytes.size());
    return t;
}

Tensor<uint8_t> record_to_u8(const TensorRecord& r) {
    if (r.dtype != DType::u8)
        throw ContractError(std::string("expected u8 tensor, got ") + dtype_name(r.dtype));
    Tensor<uint8_t> t(r.shape);
    std::memcpy(t.data.data(), r.bytes.data(), r.bytes.size());
    return t;
}

void ParameterStore::put(const std::string& name, TensorRecord rec) {
    size_t expect = static_cast<size_t>(rec.numel()) * dtype_size(rec.dtype);
    if (rec.bytes.size() != expect)
        throw ContractError("tensor " + name + ": byte length " + std::to_string(rec.bytes.size()) +
                            " does not match shape " + shape_str(rec.shape));
    if (entries_.count(name)) throw ContractError("duplicate tensor name: " + name);
    entries_.emplace(name, std::move(rec));
}

const TensorRecord& ParameterStore::get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("no such tensor: " + name);
    return it->second;
}

TensorRecord& ParameterStore::get(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("no such tensor: " + name);
    return it->second;
}

int64_t ParameterStore::total_params() const {
    int64_t n = 0;
    for (const auto& [name, rec] : entries_) n += rec.numel();
    return n;
}

bool ParameterStore::operator==(const ParameterStore& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    auto a = entries_.begin();
    auto b = o.entries_.begin();
    for (; a != entries_.end(); ++a, ++b) {
        if (a->first != b->first) return false;
        const auto& ra = a->second;
        const auto& rb = b->second;
        if (ra.dtype != rb.dtype || ra.shape != rb.shape || ra.bytes != rb.bytes ||
            ra.frozen != rb.frozen || ra.buffer != rb.buffer)
            return false;
    }
    return true;
}

std::string frozen_digest(const ParameterStore& store) {
    Sha256 h;
    for (const auto& [name, rec] : store.entries())
        if (rec.frozen) h.update(rec.bytes.data(), rec.bytes.size());
    return h.hex_digest();
}

void write_blob(const fs::path& path, const TensorRecord& rec) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContractError("cannot write blob: " + path.string());
    os.write(kBlobMagic, sizeof(kBlobMagic));
    write_pod(os, static_cast<uint32_t>(rec.dtype));
    write_pod(os, static_cast<uint32_t>(rec.shape.size()));
    for (int64_t d : rec.shape) write_pod(os, static_cast<uint64_t>(d));
    os.write(reinterpret_cast<const char*>(rec.bytes.data()),
             static_cast<std::streamsize>(rec.bytes.size()));
    if (!os) throw ContractError("short write: " + path.string());
}

TensorRecord read_blob(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ContractError("missing blob: " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kBlobMagic, 8) != 0)
        throw ContractError("bad blob magic: " + path.string());
    uint32_t dtag = 0, rank = 0;
    if (!read_pod(is, dtag) || !read_pod(is, rank))
        throw ContractError("truncated blob header: " + path.string());
    if (dtag > 2) throw ContractError("unsupported dtype tag " + std::to_string(dtag) + " in " + path.string());
    TensorRecord rec;
    rec.dtype = static_cast<DType>(dtag);
    rec.shape.resize(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        uint64_t d = 0;
        if (!read_pod(is, d) || d == 0)
            throw ContractError("bad blob dims: " + path.string());
        rec.shape[i] = static_cast<int64_t>(d);
    }
    size_t want = static_cast<size_t>(rec.numel()) * dtype_size(rec.dtype);
    rec.bytes.resize(want);
    is.read(reinterpret_cast<char*>(rec.bytes.data()), static_cast<std::streamsize>(want));
    if (static_cast<size_t>(is.gcount()) != want)
        throw ContractError("truncated blob: " + path.string());
    return rec;
}

namespace {

bool record_all_finite(const TensorRecord& rec) {
    if (rec.dtype != DType::f32) return true;
    const float* p = reinterpret_cast<const float*>(rec.bytes.data());
    size_t n = rec.bytes.size() / 4;
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const ParameterStore& store, const json& metadata) {
    for (const auto& [name, rec] : store.entries())
        if (!record_all_finite(rec))
            throw ContractError("non-finite parameter: " + name);

    std::error_code ec;
    fs::create_directories(dir / "tensors", ec);
    if (ec) throw ContractError("cannot create checkpoint directory: " + dir.string());

    json manifest;
    manifest["format"] = kManifestFormat;
    manifest["metadata"] = metadata;
    json tensors = json::array();
    for (const auto& [name, rec] : store.entries()) {  // std::map: lexicographic
        fs::path blob = dir / "tensors" / (name + ".bin");
        write_blob(blob, rec);
        json t;
        t["name"] = name;
        t["dtype"] = dtype_name(rec.dtype);
        t["shape"] = rec.shape;
        t["frozen"] = rec.frozen;
        t["buffer"] = rec.buffer;
        t["bytes"] = rec.bytes.size();
        t["sha256"] = sha256_hex(rec.bytes.data(), rec.bytes.size());
        tensors.push_back(std::move(t));
    }
    manifest["tensors"] = std::move(tensors);

    std::ofstream os(dir / "manifest.json");
    if (!os) throw ContractError("cannot write manifest: " + (dir / "manifest.json").string());
    os << manifest.dump(2) << "\n";
}

std::pair<ParameterStore, json> load_checkpoint(const fs::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw ContractError("missing manifest: " + (dir / "manifest.json").string());
    json manifest;
    try {
        is >> manifest;
    } catch (const json::exception& e) {
        throw ContractError("malformed manifest in " + dir.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != kManifestFormat)
        throw ContractError("unrecognized checkpoint format in " + dir.string());

    ParameterStore store;
    for (const auto& t : manifest.at("tensors")) {
        std::string name = t.at("name").get<std::string>();
        DType dtype = dtype_from_name(t.at("dtype").get<std::string>());
        Shape shape = t.at("shape").get<Shape>();

        fs::path blob = dir / "tensors" / (name + ".bin");
        if (!fs::exists(blob)) throw ContractError("missing blob for tensor " + name);
        TensorRecord rec = read_blob(blob);
        if (rec.dtype != dtype || rec.shape != shape)
            throw ContractError("shape/dtype mismatch for tensor " + name + ": manifest says " +
                                dtype_name(dtype) + shape_str(shape) + ", blob has " +
                                dtype_name(rec.dtype) + shape_str(rec.shape));
        std::string digest = sha256_hex(rec.bytes.data(), rec.bytes.size());
        if (digest != t.at("sha256").get<std::string>())
            throw ContractError("checksum mismatch for tensor " + name);
        rec.frozen = t.at("frozen").get<bool>();
        rec.buffer = t.value("buffer", false);
        store.put(name, std::move(rec));
    }
    return {std::move(store), manifest.at("metadata")};
}

}  // namespace ladderseg
