#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "peftkit/adapter.hpp"
#include "peftkit/model.hpp"

namespace peftkit {

// Binary plug-in container, little-endian throughout:
//   magic "PEFT" | version u16 | kind u8 | config digest (32 bytes) |
//   tensor count u32 | per tensor: name len u16, name, dtype u8 (0 = f32),
//   ndim u8, dims u32 each, payload row-major | CRC32 u32
// The CRC covers every byte that precedes it.

enum class AdapterKind : std::uint8_t { lora = 0, prefix = 1, base_model = 2 };

inline const char* adapter_kind_name(AdapterKind k) {
    switch (k) {
    case AdapterKind::lora: return "lora";
    case AdapterKind::prefix: return "prefix";
    case AdapterKind::base_model: return "base-model";
    }
    return "?";
}

constexpr std::uint16_t kAdapterFormatVersion = 1;

struct RawTensor {
    std::string name;
    Shape dims;
    std::vector<float> data;
};

struct AdapterFileContents {
    std::uint16_t version = 0;
    AdapterKind kind = AdapterKind::lora;
    Digest32 config_digest{};
    std::vector<RawTensor> tensors;
    std::size_t file_size = 0;

    const RawTensor* find(const std::string& name) const;
};

void write_adapter_file(const std::string& path, AdapterKind kind, const Digest32& config_digest,
                        const std::vector<RawTensor>& tensors);

// Parses and CRC-verifies a container without interpreting its tensors.
AdapterFileContents read_adapter_file(const std::string& path);

void save_adapter(const LoraAdapter& adapter, const std::string& path);
void save_adapter(const PrefixAdapter& adapter, const std::string& path);
void save_base_weights(const ModelWeights& weights, const std::string& path);

struct LoadedAdapter {
    AdapterKind kind;
    std::optional<LoraAdapter> lora;
    std::optional<PrefixAdapter> prefix;
};

// Fails with CompatError when the file's digest does not match `config`.
LoadedAdapter load_adapter(const std::string& path, const ModelConfig& config);

// Base checkpoints embed their own config; the header digest must agree.
ModelWeights load_base_weights(const std::string& path);

} // namespace peftkit
