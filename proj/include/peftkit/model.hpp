#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "peftkit/digest.hpp"
#include "peftkit/error.hpp"
#include "peftkit/rng.hpp"
#include "peftkit/tensor.hpp"

namespace peftkit {

struct ModelConfig {
    std::size_t vocab_size = 512;
    std::size_t dim = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t max_seq_len = 256;
    std::size_t ffn_hidden = 172;
    float rope_base = 10000.0f;
    float norm_eps = 1e-5f;

    void validate() const {
        if (vocab_size == 0 || dim == 0 || n_layers == 0 || n_heads == 0 ||
            max_seq_len == 0 || ffn_hidden == 0) {
            throw ConfigError("model config: all sizes must be positive");
        }
        if (dim % n_heads != 0) {
            throw ConfigError("model config: dim " + std::to_string(dim) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        }
        if ((dim / n_heads) % 2 != 0) {
            throw ConfigError("model config: head dim must be even for rotary encoding");
        }
        if (rope_base <= 0.0f || norm_eps <= 0.0f) {
            throw ConfigError("model config: rope_base and norm_eps must be positive");
        }
    }

    std::size_t head_dim() const { return dim / n_heads; }

    std::string canonical_string() const {
        return "peftkit-model-v1;vocab=" + std::to_string(vocab_size) +
               ";dim=" + std::to_string(dim) + ";layers=" + std::to_string(n_layers) +
               ";heads=" + std::to_string(n_heads) + ";max_seq=" + std::to_string(max_seq_len) +
               ";ffn=" + std::to_string(ffn_hidden) + ";rope_base=" + std::to_string(rope_base) +
               ";norm_eps=" + std::to_string(norm_eps);
    }

    Digest32 digest() const {
        const std::string s = canonical_string();
        return sha256(s.data(), s.size());
    }

    bool operator==(const ModelConfig&) const = default;

    // Default constructed = the small configuration used by the bundled
    // fixtures and tests.
    static ModelConfig toy() { return ModelConfig{}; }

    // Full-scale reference configuration; used only for analytic parameter
    // and storage accounting, never allocated.
    static ModelConfig reference_full_scale() {
        ModelConfig c;
        c.vocab_size = 32000;
        c.dim = 4096;
        c.n_layers = 32;
        c.n_heads = 32;
        c.max_seq_len = 2048;
        c.ffn_hidden = 11008;
        return c;
    }
};

template <class S>
struct LayerWeightsT {
    Tensor<S> attn_norm; // [C]
    Tensor<S> wq, wk, wv, wo; // [C x C]
    Tensor<S> ffn_norm; // [C]
    Tensor<S> w_gate, w_up; // [C x F]
    Tensor<S> w_down; // [F x C]
};

// Decoder-only transformer weights. The base model is frozen: tensors are
// created without requires_grad, so no gradient ever reaches them and the
// optimizer never sees them.
template <class S>
struct ModelWeightsT {
    ModelConfig config;
    Tensor<S> tok_embed; // [V x C]
    std::vector<LayerWeightsT<S>> layers;
    Tensor<S> final_norm; // [C]
    Tensor<S> output_head; // [C x V]

    std::vector<std::pair<std::string, Tensor<S>>> named_tensors() const {
        std::vector<std::pair<std::string, Tensor<S>>> out;
        out.emplace_back("tok_embed", tok_embed);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            out.emplace_back(p + "attn_norm", layers[l].attn_norm);
            out.emplace_back(p + "wq", layers[l].wq);
            out.emplace_back(p + "wk", layers[l].wk);
            out.emplace_back(p + "wv", layers[l].wv);
            out.emplace_back(p + "wo", layers[l].wo);
            out.emplace_back(p + "ffn_norm", layers[l].ffn_norm);
            out.emplace_back(p + "w_gate", layers[l].w_gate);
            out.emplace_back(p + "w_up", layers[l].w_up);
            out.emplace_back(p + "w_down", layers[l].w_down);
        }
        out.emplace_back("final_norm", final_norm);
        out.emplace_back("output_head", output_head);
        return out;
    }
};

// Matrices ~ N(0, 0.02), norm weights = 1. `trainable` exists for tests that
// fit the whole toy model; real use keeps the base frozen.
template <class S>
ModelWeightsT<S> init_weights(const ModelConfig& config, Rng& rng, bool trainable = false) {
    config.validate();
    constexpr double kStd = 0.02;
    ModelWeightsT<S> w;
    w.config = config;
    const std::size_t c = config.dim, f = config.ffn_hidden, v = config.vocab_size;
    w.tok_embed = Tensor<S>::randn({v, c}, rng, kStd, trainable);
    w.layers.resize(config.n_layers);
    for (auto& lw : w.layers) {
        lw.attn_norm = Tensor<S>::full({c}, S(1), trainable);
        lw.wq = Tensor<S>::randn({c, c}, rng, kStd, trainable);
        lw.wk = Tensor<S>::randn({c, c}, rng, kStd, trainable);
        lw.wv = Tensor<S>::randn({c, c}, rng, kStd, trainable);
        lw.wo = Tensor<S>::randn({c, c}, rng, kStd, trainable);
        lw.ffn_norm = Tensor<S>::full({c}, S(1), trainable);
        lw.w_gate = Tensor<S>::randn({c, f}, rng, kStd, trainable);
        lw.w_up = Tensor<S>::randn({c, f}, rng, kStd, trainable);
        lw.w_down = Tensor<S>::randn({f, c}, rng, kStd, trainable);
    }
    w.final_norm = Tensor<S>::full({c}, S(1), trainable);
    w.output_head = Tensor<S>::randn({c, v}, rng, kStd, trainable);
    return w;
}

// Per-tensor SHA-256 digests, used to verify that training never drifts the
// base weights.
template <class S>
std::vector<std::pair<std::string, Digest32>> tensor_digests(const ModelWeightsT<S>& w) {
    std::vector<std::pair<std::string, Digest32>> out;
    for (const auto& [name, t] : w.named_tensors()) {
        out.emplace_back(name, sha256(t.values().data(), t.values().size() * sizeof(S)));
    }
    return out;
}

using ModelWeights = ModelWeightsT<float>;

} // namespace peftkit
