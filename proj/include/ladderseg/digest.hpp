#pragma once

#include <cstdint>
#include <string>

namespace ladderseg {

// Streaming SHA-256 (OpenSSL EVP behind the scenes).
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, size_t len);
    std::string hex_digest();  // finalizes; call once

private:
    void* ctx_;
};

std::string sha256_hex(const void* data, size_t len);

}  // namespace ladderseg
