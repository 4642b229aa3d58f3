#include "peftkit/adapter_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "peftkit/digest.hpp"

static_assert(std::endian::native == std::endian::little,
              "adapter container assumes a little-endian host");

namespace peftkit {

namespace {

void append_bytes(std::vector<unsigned char>& buf, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    buf.insert(buf.end(), p, p + n);
}

template <class T>
void append_le(std::vector<unsigned char>& buf, T v) {
    append_bytes(buf, &v, sizeof(T));
}

struct Reader {
    const std::vector<unsigned char>& buf;
    std::size_t pos = 0;

    void read(void* out, std::size_t n) {
        if (pos + n > buf.size()) {
            throw FormatError("adapter file truncated");
        }
        std::memcpy(out, &buf[pos], n);
        pos += n;
    }

    template <class T>
    T read_le() {
        T v;
        read(&v, sizeof(T));
        return v;
    }
};

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open file: " + path);
    }
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    return buf;
}

RawTensor to_raw(const std::string& name, const Tensor<float>& t) {
    return RawTensor{name, t.shape(), t.values()};
}

float hyper_value(const RawTensor& t, std::size_t i) {
    if (i >= t.data.size()) {
        throw FormatError("adapter file: hyper tensor too short");
    }
    return t.data[i];
}

} // namespace

const RawTensor* AdapterFileContents::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) {
            return &t;
        }
    }
    return nullptr;
}

void write_adapter_file(const std::string& path, AdapterKind kind, const Digest32& config_digest,
                        const std::vector<RawTensor>& tensors) {
    std::vector<unsigned char> buf;
    append_bytes(buf, "PEFT", 4);
    append_le<std::uint16_t>(buf, kAdapterFormatVersion);
    append_le<std::uint8_t>(buf, static_cast<std::uint8_t>(kind));
    append_bytes(buf, config_digest.data(), config_digest.size());
    append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (t.name.size() > 0xffff) {
            throw UsageError("tensor name too long: " + t.name);
        }
        append_le<std::uint16_t>(buf, static_cast<std::uint16_t>(t.name.size()));
        append_bytes(buf, t.name.data(), t.name.size());
        append_le<std::uint8_t>(buf, 0); // dtype f32
        append_le<std::uint8_t>(buf, static_cast<std::uint8_t>(t.dims.size()));
        for (std::size_t d : t.dims) {
            append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
        }
        append_bytes(buf, t.data.data(), t.data.size() * sizeof(float));
    }
    const std::uint32_t crc = crc32_bytes(buf.data(), buf.size());
    append_le<std::uint32_t>(buf, crc);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write file: " + path);
    }
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!out) {
        throw FormatError("short write: " + path);
    }
}

AdapterFileContents read_adapter_file(const std::string& path) {
    const std::vector<unsigned char> buf = read_file(path);
    if (buf.size() < 4 + 2 + 1 + 32 + 4 + 4) {
        throw FormatError("adapter file too short: " + path);
    }
    const std::uint32_t stored_crc =
        static_cast<std::uint32_t>(buf[buf.size() - 4]) |
        (static_cast<std::uint32_t>(buf[buf.size() - 3]) << 8) |
        (static_cast<std::uint32_t>(buf[buf.size() - 2]) << 16) |
        (static_cast<std::uint32_t>(buf[buf.size() - 1]) << 24);

    Reader r{buf};
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, "PEFT", 4) != 0) {
        throw FormatError("bad magic in " + path);
    }
    AdapterFileContents out;
    out.file_size = buf.size();
    out.version = r.read_le<std::uint16_t>();
    if (out.version != kAdapterFormatVersion) {
        throw FormatError("unsupported adapter format version " + std::to_string(out.version));
    }
    const std::uint8_t kind = r.read_le<std::uint8_t>();
    if (kind > 2) {
        throw FormatError("unknown adapter kind byte " + std::to_string(kind));
    }
    out.kind = static_cast<AdapterKind>(kind);
    r.read(out.config_digest.data(), out.config_digest.size());
    const std::uint32_t count = r.read_le<std::uint32_t>();
    out.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        RawTensor t;
        const std::uint16_t name_len = r.read_le<std::uint16_t>();
        t.name.resize(name_len);
        r.read(t.name.data(), name_len);
        const std::uint8_t dtype = r.read_le<std::uint8_t>();
        if (dtype != 0) {
            throw FormatError("unknown dtype " + std::to_string(dtype) + " for tensor " + t.name);
        }
        const std::uint8_t ndim = r.read_le<std::uint8_t>();
        std::size_t numel = 1;
        for (std::uint8_t d = 0; d < ndim; ++d) {
            const std::uint32_t dim = r.read_le<std::uint32_t>();
            t.dims.push_back(dim);
            numel *= dim;
        }
        t.data.resize(numel);
        r.read(t.data.data(), numel * sizeof(float));
        out.tensors.push_back(std::move(t));
    }
    if (r.pos != buf.size() - 4) {
        throw FormatError("trailing bytes in adapter file: " + path);
    }
    const std::uint32_t computed = crc32_bytes(buf.data(), buf.size() - 4);
    if (computed != stored_crc) {
        throw FormatError("checksum mismatch in " + path);
    }
    return out;
}

// ---------------------------------------------------------------------------
// typed save/load
// ---------------------------------------------------------------------------

namespace {

std::uint32_t target_mask(const std::vector<LoraTarget>& targets) {
    std::uint32_t m = 0;
    for (LoraTarget t : targets) {
        m |= 1u << static_cast<unsigned>(t);
    }
    return m;
}

std::vector<LoraTarget> targets_from_mask(std::uint32_t mask) {
    std::vector<LoraTarget> out;
    for (unsigned b = 0; b < 4; ++b) {
        if (mask & (1u << b)) {
            out.push_back(static_cast<LoraTarget>(b));
        }
    }
    if (out.empty()) {
        throw FormatError("lora adapter file has an empty target mask");
    }
    return out;
}

} // namespace

void save_adapter(const LoraAdapter& adapter, const std::string& path) {
    std::vector<RawTensor> tensors;
    tensors.push_back(RawTensor{"hyper",
                                {3},
                                {static_cast<float>(adapter.rank), adapter.alpha,
                                 static_cast<float>(target_mask(adapter.targets))}});
    for (std::size_t l = 0; l < adapter.layers.size(); ++l) {
        for (std::size_t i = 0; i < adapter.targets.size(); ++i) {
            const std::string base =
                "layers." + std::to_string(l) + "." + lora_target_name(adapter.targets[i]);
            tensors.push_back(to_raw(base + ".down", adapter.layers[l][i].down));
            tensors.push_back(to_raw(base + ".up", adapter.layers[l][i].up));
        }
    }
    write_adapter_file(path, AdapterKind::lora, adapter.config_digest, tensors);
}

void save_adapter(const PrefixAdapter& adapter, const std::string& path) {
    std::vector<RawTensor> tensors;
    tensors.push_back(RawTensor{"hyper",
                                {4},
                                {static_cast<float>(adapter.prompt_len),
                                 static_cast<float>(adapter.n_prefixed),
                                 adapter.per_head_gates ? 1.0f : 0.0f,
                                 adapter.rotate_prompts ? 1.0f : 0.0f}});
    for (std::size_t i = 0; i < adapter.n_prefixed; ++i) {
        const std::string base = "prefixed." + std::to_string(i);
        tensors.push_back(to_raw(base + ".prompt", adapter.prompts[i]));
        tensors.push_back(to_raw(base + ".gates", adapter.gates[i]));
    }
    write_adapter_file(path, AdapterKind::prefix, adapter.config_digest, tensors);
}

void save_base_weights(const ModelWeights& weights, const std::string& path) {
    const ModelConfig& c = weights.config;
    std::vector<RawTensor> tensors;
    tensors.push_back(RawTensor{"config",
                                {8},
                                {static_cast<float>(c.vocab_size), static_cast<float>(c.dim),
                                 static_cast<float>(c.n_layers), static_cast<float>(c.n_heads),
                                 static_cast<float>(c.max_seq_len),
                                 static_cast<float>(c.ffn_hidden), c.rope_base, c.norm_eps}});
    for (const auto& [name, t] : weights.named_tensors()) {
        tensors.push_back(to_raw(name, t));
    }
    write_adapter_file(path, AdapterKind::base_model, c.digest(), tensors);
}

namespace {

Tensor<float> tensor_from_raw(const RawTensor& raw, const Shape& expect, bool requires_grad) {
    if (raw.dims != expect) {
        throw FormatError("tensor " + raw.name + " has shape " + shape_string(raw.dims) +
                          ", expected " + shape_string(expect));
    }
    return Tensor<float>::from_data(raw.dims, raw.data, requires_grad);
}

const RawTensor& require_tensor(const AdapterFileContents& file, const std::string& name) {
    const RawTensor* t = file.find(name);
    if (t == nullptr) {
        throw FormatError("adapter file is missing tensor " + name);
    }
    return *t;
}

LoraAdapter assemble_lora(const AdapterFileContents& file, const ModelConfig& config) {
    const RawTensor& hyper = require_tensor(file, "hyper");
    LoraAdapter a;
    a.rank = static_cast<std::size_t>(hyper_value(hyper, 0));
    a.alpha = hyper_value(hyper, 1);
    a.targets = targets_from_mask(static_cast<std::uint32_t>(hyper_value(hyper, 2)));
    a.config_digest = file.config_digest;
    if (a.rank == 0 || a.rank > config.dim) {
        throw FormatError("lora adapter file has invalid rank " + std::to_string(a.rank));
    }
    a.layers.resize(config.n_layers);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        a.layers[l].resize(a.targets.size());
        for (std::size_t i = 0; i < a.targets.size(); ++i) {
            const std::string base =
                "layers." + std::to_string(l) + "." + lora_target_name(a.targets[i]);
            a.layers[l][i].down = tensor_from_raw(require_tensor(file, base + ".down"),
                                                  {config.dim, a.rank}, true);
            a.layers[l][i].up = tensor_from_raw(require_tensor(file, base + ".up"),
                                                {a.rank, config.dim}, true);
        }
    }
    return a;
}

PrefixAdapter assemble_prefix(const AdapterFileContents& file, const ModelConfig& config) {
    const RawTensor& hyper = require_tensor(file, "hyper");
    PrefixAdapter a;
    a.prompt_len = static_cast<std::size_t>(hyper_value(hyper, 0));
    a.n_prefixed = static_cast<std::size_t>(hyper_value(hyper, 1));
    a.per_head_gates = hyper_value(hyper, 2) != 0.0f;
    a.rotate_prompts = hyper_value(hyper, 3) != 0.0f;
    a.config_digest = file.config_digest;
    if (a.prompt_len == 0 || a.n_prefixed == 0 || a.n_prefixed > config.n_layers) {
        throw FormatError("prefix adapter file has invalid geometry");
    }
    const Shape gate_shape{a.per_head_gates ? config.n_heads : 1};
    for (std::size_t i = 0; i < a.n_prefixed; ++i) {
        const std::string base = "prefixed." + std::to_string(i);
        a.prompts.push_back(tensor_from_raw(require_tensor(file, base + ".prompt"),
                                            {a.prompt_len, config.dim}, true));
        a.gates.push_back(tensor_from_raw(require_tensor(file, base + ".gates"), gate_shape, true));
    }
    return a;
}

} // namespace

LoadedAdapter load_adapter(const std::string& path, const ModelConfig& config) {
    const AdapterFileContents file = read_adapter_file(path);
    if (file.kind == AdapterKind::base_model) {
        throw FormatError(path + " is a base-model checkpoint, not an adapter");
    }
    if (file.config_digest != config.digest()) {
        throw CompatError("adapter " + path + " was built against a different base config");
    }
    LoadedAdapter out;
    out.kind = file.kind;
    if (file.kind == AdapterKind::lora) {
        out.lora = assemble_lora(file, config);
    } else {
        out.prefix = assemble_prefix(file, config);
    }
    return out;
}

ModelWeights load_base_weights(const std::string& path) {
    const AdapterFileContents file = read_adapter_file(path);
    if (file.kind != AdapterKind::base_model) {
        throw FormatError(path + " is not a base-model checkpoint");
    }
    const RawTensor& cfg = require_tensor(file, "config");
    ModelConfig c;
    c.vocab_size = static_cast<std::size_t>(hyper_value(cfg, 0));
    c.dim = static_cast<std::size_t>(hyper_value(cfg, 1));
    c.n_layers = static_cast<std::size_t>(hyper_value(cfg, 2));
    c.n_heads = static_cast<std::size_t>(hyper_value(cfg, 3));
    c.max_seq_len = static_cast<std::size_t>(hyper_value(cfg, 4));
    c.ffn_hidden = static_cast<std::size_t>(hyper_value(cfg, 5));
    c.rope_base = hyper_value(cfg, 6);
    c.norm_eps = hyper_value(cfg, 7);
    c.validate();
    if (file.config_digest != c.digest()) {
        throw FormatError("base checkpoint digest does not match its embedded config");
    }

    ModelWeights w;
    w.config = c;
    w.tok_embed = tensor_from_raw(require_tensor(file, "tok_embed"), {c.vocab_size, c.dim}, false);
    w.layers.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        auto& lw = w.layers[l];
        lw.attn_norm = tensor_from_raw(require_tensor(file, p + "attn_norm"), {c.dim}, false);
        lw.wq = tensor_from_raw(require_tensor(file, p + "wq"), {c.dim, c.dim}, false);
        lw.wk = tensor_from_raw(require_tensor(file, p + "wk"), {c.dim, c.dim}, false);
        lw.wv = tensor_from_raw(require_tensor(file, p + "wv"), {c.dim, c.dim}, false);
        lw.wo = tensor_from_raw(require_tensor(file, p + "wo"), {c.dim, c.dim}, false);
        lw.ffn_norm = tensor_from_raw(require_tensor(file, p + "ffn_norm"), {c.dim}, false);
        lw.w_gate = tensor_from_raw(require_tensor(file, p + "w_gate"), {c.dim, c.ffn_hidden}, false);
        lw.w_up = tensor_from_raw(require_tensor(file, p + "w_up"), {c.dim, c.ffn_hidden}, false);
        lw.w_down = tensor_from_raw(require_tensor(file, p + "w_down"), {c.ffn_hidden, c.dim}, false);
    }
    w.final_norm = tensor_from_raw(require_tensor(file, "final_norm"), {c.dim}, false);
    w.output_head = tensor_from_raw(require_tensor(file, "output_head"), {c.dim, c.vocab_size}, false);
    return w;
}

} // namespace peftkit
