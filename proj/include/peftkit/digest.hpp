#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace peftkit {

using Digest32 = std::array<unsigned char, 32>;

// SHA-256 of a byte buffer.
Digest32 sha256(const void* data, std::size_t size);

// Incremental SHA-256 for digesting many tensors without copying.
class Sha256Stream {
public:
    Sha256Stream();
    ~Sha256Stream();
    Sha256Stream(const Sha256Stream&) = delete;
    Sha256Stream& operator=(const Sha256Stream&) = delete;

    void update(const void* data, std::size_t size);
    Digest32 finish();

private:
    void* ctx_;
};

// CRC-32 (IEEE / zlib polynomial) of a byte buffer; can be chained.
std::uint32_t crc32_bytes(const void* data, std::size_t size, std::uint32_t seed = 0);

std::string hex_string(const Digest32& d);

} // namespace peftkit
