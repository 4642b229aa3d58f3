#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "peftkit/model.hpp"
#include "peftkit/tensor.hpp"

namespace peftkit {

// ---------------------------------------------------------------------------
// low-rank adaptation
// ---------------------------------------------------------------------------

enum class LoraTarget : std::uint8_t { q = 0, k = 1, v = 2, o = 3 };

inline const char* lora_target_name(LoraTarget t) {
    switch (t) {
    case LoraTarget::q: return "wq";
    case LoraTarget::k: return "wk";
    case LoraTarget::v: return "wv";
    case LoraTarget::o: return "wo";
    }
    return "?";
}

struct LoraHyper {
    std::size_t rank = 16;
    float alpha = 16.0f;
    std::vector<LoraTarget> targets = {LoraTarget::q, LoraTarget::v};
};

template <class S>
struct LoraEntryT {
    Tensor<S> down; // [d x r], d = input dim of the target matrix
    Tensor<S> up;   // [r x k], k = output dim; zero at initialization
};

template <class S>
struct LoraAdapterT {
    std::size_t rank = 0;
    S alpha = 0;
    std::vector<LoraTarget> targets; // sorted, unique
    std::vector<std::vector<LoraEntryT<S>>> layers; // layers[l][i] pairs with targets[i]
    Digest32 config_digest{};

    // Effective multiplier on the low-rank update; equals 1 when alpha == rank.
    S scaling() const { return alpha / static_cast<S>(rank); }

    const LoraEntryT<S>* entry(std::size_t layer, LoraTarget t) const {
        for (std::size_t i = 0; i < targets.size(); ++i) {
            if (targets[i] == t) {
                return &layers[layer][i];
            }
        }
        return nullptr;
    }
};

template <class S>
LoraAdapterT<S> init_lora(const ModelConfig& config, const LoraHyper& hyper, Rng& rng) {
    config.validate();
    if (hyper.rank == 0) {
        throw ConfigError("lora: rank must be >= 1");
    }
    if (hyper.rank > config.dim) {
        throw ConfigError("lora: rank " + std::to_string(hyper.rank) +
                          " exceeds target dimension " + std::to_string(config.dim));
    }
    if (hyper.targets.empty()) {
        throw ConfigError("lora: empty target set");
    }
    LoraAdapterT<S> a;
    a.rank = hyper.rank;
    a.alpha = static_cast<S>(hyper.alpha);
    a.targets = hyper.targets;
    std::sort(a.targets.begin(), a.targets.end());
    a.targets.erase(std::unique(a.targets.begin(), a.targets.end()), a.targets.end());
    a.config_digest = config.digest();
    a.layers.resize(config.n_layers);
    const std::size_t c = config.dim;
    for (auto& layer : a.layers) {
        layer.resize(a.targets.size());
        for (auto& e : layer) {
            e.down = Tensor<S>::randn({c, hyper.rank}, rng, 0.02, true);
            e.up = Tensor<S>::zeros({hyper.rank, c}, true);
        }
    }
    return a;
}

// h + scaling * (x W_down) W_up, where h = x W0. With entry == nullptr this
// is just the base projection.
template <class S>
Tensor<S> lora_apply(const Tensor<S>& x, const Tensor<S>& w0, const LoraEntryT<S>* entry,
                     S scaling) {
    Tensor<S> h = matmul(x, w0);
    if (entry == nullptr) {
        return h;
    }
    if (entry->down.dim(0) != w0.dim(0) || entry->up.dim(1) != w0.dim(1) ||
        entry->down.dim(1) != entry->up.dim(0)) {
        throw CompatError("lora entry " + shape_string(entry->down.shape()) + "/" +
                          shape_string(entry->up.shape()) + " incompatible with base matrix " +
                          shape_string(w0.shape()));
    }
    return add(h, scale(matmul(matmul(x, entry->down), entry->up), scaling));
}

// Folds the adapter into a fresh copy of the base weights:
// every targeted matrix becomes W0 + scaling * W_down W_up, everything else
// is copied bit for bit. The result runs without the adapter.
template <class S>
ModelWeightsT<S> lora_merge(const ModelWeightsT<S>& base, const LoraAdapterT<S>& adapter) {
    if (adapter.config_digest != base.config.digest()) {
        throw CompatError("lora merge: adapter was built against a different base config");
    }
    auto copy_tensor = [](const Tensor<S>& t) {
        return Tensor<S>::from_data(t.shape(), t.values(), false);
    };
    ModelWeightsT<S> merged;
    merged.config = base.config;
    merged.tok_embed = copy_tensor(base.tok_embed);
    merged.final_norm = copy_tensor(base.final_norm);
    merged.output_head = copy_tensor(base.output_head);
    merged.layers.resize(base.layers.size());
    const S scaling = adapter.scaling();
    for (std::size_t l = 0; l < base.layers.size(); ++l) {
        const auto& src = base.layers[l];
        auto& dst = merged.layers[l];
        dst.attn_norm = copy_tensor(src.attn_norm);
        dst.ffn_norm = copy_tensor(src.ffn_norm);
        dst.w_gate = copy_tensor(src.w_gate);
        dst.w_up = copy_tensor(src.w_up);
        dst.w_down = copy_tensor(src.w_down);
        const Tensor<S>* mats[4] = {&src.wq, &src.wk, &src.wv, &src.wo};
        Tensor<S>* outs[4] = {&dst.wq, &dst.wk, &dst.wv, &dst.wo};
        const LoraTarget kinds[4] = {LoraTarget::q, LoraTarget::k, LoraTarget::v, LoraTarget::o};
        for (int t = 0; t < 4; ++t) {
            *outs[t] = copy_tensor(*mats[t]);
            const LoraEntryT<S>* e = adapter.entry(l, kinds[t]);
            if (e == nullptr) {
                continue;
            }
            const std::size_t d = e->down.dim(0), r = e->down.dim(1), k = e->up.dim(1);
            auto& w = outs[t]->values_mut();
            const auto& down = e->down.values();
            const auto& up = e->up.values();
            for (std::size_t i = 0; i < d; ++i) {
                for (std::size_t p = 0; p < r; ++p) {
                    const S dip = down[i * r + p] * scaling;
                    if (dip == S(0)) {
                        continue;
                    }
                    for (std::size_t j = 0; j < k; ++j) {
                        w[i * k + j] += dip * up[p * k + j];
                    }
                }
            }
        }
    }
    return merged;
}

// ---------------------------------------------------------------------------
// zero-init attention prefix tuning
// ---------------------------------------------------------------------------

struct PrefixHyper {
    std::size_t prompt_len = 10; // learnable prompt tokens per prefixed layer
    std::size_t n_prefixed = 30; // topmost layers that receive prompts
    bool per_head_gates = true;  // one gate per layer per head; false = one per layer
    bool rotate_prompts = false; // treat prompts as pre-sequence positions for rotary encoding
};

template <class S>
struct PrefixAdapterT {
    std::size_t prompt_len = 0;
    std::size_t n_prefixed = 0;
    bool per_head_gates = true;
    bool rotate_prompts = false;
    std::vector<Tensor<S>> prompts; // [K x C], index 0 = lowest prefixed layer
    std::vector<Tensor<S>> gates;   // [n_heads] or [1]; zero at initialization
    Digest32 config_digest{};

    std::size_t first_layer(std::size_t n_layers) const { return n_layers - n_prefixed; }
};

template <class S>
PrefixAdapterT<S> init_prefix(const ModelConfig& config, const PrefixHyper& hyper, Rng& rng) {
    config.validate();
    if (hyper.prompt_len == 0) {
        throw ConfigError("prefix: prompt length must be >= 1");
    }
    if (hyper.n_prefixed == 0 || hyper.n_prefixed > config.n_layers) {
        throw ConfigError("prefix: prefixed layer count " + std::to_string(hyper.n_prefixed) +
                          " not in [1, " + std::to_string(config.n_layers) + "]");
    }
    PrefixAdapterT<S> a;
    a.prompt_len = hyper.prompt_len;
    a.n_prefixed = hyper.n_prefixed;
    a.per_head_gates = hyper.per_head_gates;
    a.rotate_prompts = hyper.rotate_prompts;
    a.config_digest = config.digest();
    for (std::size_t i = 0; i < hyper.n_prefixed; ++i) {
        a.prompts.push_back(Tensor<S>::randn({hyper.prompt_len, config.dim}, rng, 0.02, true));
        a.gates.push_back(Tensor<S>::zeros({hyper.per_head_gates ? config.n_heads : 1}, true));
    }
    return a;
}

// ---------------------------------------------------------------------------
// parameter accounting
// ---------------------------------------------------------------------------

// sum over layers and targets of r * (d + k); attention targets are square,
// so d = k = dim.
inline std::size_t lora_trainable_count(const ModelConfig& config, std::size_t rank,
                                        std::size_t n_targets) {
    return config.n_layers * n_targets * rank * (config.dim + config.dim);
}

// L * K * C prompt scalars plus one gate per prefixed layer (per head).
inline std::size_t prefix_trainable_count(const ModelConfig& config, std::size_t prompt_len,
                                          std::size_t n_prefixed, bool per_head_gates) {
    return n_prefixed * prompt_len * config.dim +
           n_prefixed * (per_head_gates ? config.n_heads : 1);
}

template <class S>
std::size_t count_trainable(const LoraAdapterT<S>& a) {
    std::size_t n = 0;
    for (const auto& layer : a.layers) {
        for (const auto& e : layer) {
            n += e.down.numel() + e.up.numel();
        }
    }
    return n;
}

template <class S>
std::size_t count_trainable(const PrefixAdapterT<S>& a) {
    std::size_t n = 0;
    for (const auto& p : a.prompts) {
        n += p.numel();
    }
    for (const auto& g : a.gates) {
        n += g.numel();
    }
    return n;
}

template <class S>
std::vector<Tensor<S>> trainable_params(const LoraAdapterT<S>& a) {
    std::vector<Tensor<S>> out;
    for (const auto& layer : a.layers) {
        for (const auto& e : layer) {
            out.push_back(e.down);
            out.push_back(e.up);
        }
    }
    return out;
}

template <class S>
std::vector<Tensor<S>> trainable_params(const PrefixAdapterT<S>& a) {
    std::vector<Tensor<S>> out;
    for (const auto& p : a.prompts) {
        out.push_back(p);
    }
    for (const auto& g : a.gates) {
        out.push_back(g);
    }
    return out;
}

using LoraAdapter = LoraAdapterT<float>;
using PrefixAdapter = PrefixAdapterT<float>;

} // namespace peftkit
