#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "peftkit/adapter.hpp"
#include "peftkit/model.hpp"
#include "peftkit/tensor.hpp"

namespace peftkit {

// Adapters to attach to a forward pass; either or both may be null.
template <class S>
struct AdapterSetT {
    const LoraAdapterT<S>* lora = nullptr;
    const PrefixAdapterT<S>* prefix = nullptr;
};

using AdapterSet = AdapterSetT<float>;

namespace detail {

template <class S>
void check_adapters(const ModelWeightsT<S>& w, const AdapterSetT<S>& adapters) {
    const Digest32 digest = w.config.digest();
    if (adapters.lora != nullptr && adapters.lora->config_digest != digest) {
        throw CompatError("lora adapter was built against a different base config");
    }
    if (adapters.prefix != nullptr) {
        if (adapters.prefix->config_digest != digest) {
            throw CompatError("prefix adapter was built against a different base config");
        }
        if (adapters.prefix->n_prefixed > w.config.n_layers) {
            throw CompatError("prefix adapter spans more layers than the model has");
        }
    }
}

} // namespace detail

// Causal decoder forward pass: logits[i] depends only on tokens[0..i].
// Freshly initialized adapters contribute exact zeros, so their logits are
// bitwise those of the adapter-free pass.
template <class S>
Tensor<S> forward(const ModelWeightsT<S>& w, std::span<const int> tokens,
                  const AdapterSetT<S>& adapters = {}, AttentionTrace* trace = nullptr) {
    if (tokens.empty()) {
        throw ValidationError("forward: empty token sequence");
    }
    if (tokens.size() > w.config.max_seq_len) {
        throw ValidationError("forward: sequence length " + std::to_string(tokens.size()) +
                              " exceeds max_seq_len " + std::to_string(w.config.max_seq_len));
    }
    detail::check_adapters(w, adapters);

    const std::size_t heads = w.config.n_heads;
    const double base = static_cast<double>(w.config.rope_base);
    const S eps = static_cast<S>(w.config.norm_eps);
    const LoraAdapterT<S>* lora = adapters.lora;
    const PrefixAdapterT<S>* prefix = adapters.prefix;
    const S lora_scale = lora != nullptr ? lora->scaling() : S(0);
    const std::size_t first_prefixed =
        prefix != nullptr ? prefix->first_layer(w.config.n_layers) : w.config.n_layers;

    auto proj = [&](const Tensor<S>& x, const Tensor<S>& w0, std::size_t layer, LoraTarget t) {
        const LoraEntryT<S>* e = lora != nullptr ? lora->entry(layer, t) : nullptr;
        return lora_apply(x, w0, e, lora_scale);
    };

    Tensor<S> h = embedding(w.tok_embed, tokens);
    for (std::size_t l = 0; l < w.config.n_layers; ++l) {
        const auto& lw = w.layers[l];
        Tensor<S> a = rmsnorm(h, lw.attn_norm, eps);
        Tensor<S> q = proj(a, lw.wq, l, LoraTarget::q);
        Tensor<S> k = proj(a, lw.wk, l, LoraTarget::k);
        Tensor<S> v = proj(a, lw.wv, l, LoraTarget::v);

        Tensor<S> ctx;
        if (prefix != nullptr && l >= first_prefixed) {
            const std::size_t pi = l - first_prefixed;
            const Tensor<S>& prompts = prefix->prompts[pi];
            // prompt keys/values go through the same projections as real tokens
            Tensor<S> pk = proj(prompts, lw.wk, l, LoraTarget::k);
            Tensor<S> pv = proj(prompts, lw.wv, l, LoraTarget::v);
            std::size_t seq_pos_offset = 0;
            if (prefix->rotate_prompts) {
                // optional mode: prompts occupy positions 0..K-1, the real
                // sequence is shifted behind them
                pk = rope(pk, heads, base, 0);
                seq_pos_offset = prefix->prompt_len;
            }
            q = rope(q, heads, base, seq_pos_offset);
            k = rope(k, heads, base, seq_pos_offset);
            ctx = causal_attention(q, k, v, heads, pk, pv, prefix->gates[pi], trace);
        } else {
            q = rope(q, heads, base);
            k = rope(k, heads, base);
            ctx = causal_attention(q, k, v, heads, {}, {}, {}, trace);
        }
        h = add(h, proj(ctx, lw.wo, l, LoraTarget::o));

        Tensor<S> f = rmsnorm(h, lw.ffn_norm, eps);
        Tensor<S> gated = mul(silu(matmul(f, lw.w_gate)), matmul(f, lw.w_up));
        h = add(h, matmul(gated, lw.w_down));
    }
    Tensor<S> final_h = rmsnorm(h, w.final_norm, eps);
    return matmul(final_h, w.output_head);
}

enum class DecodeMode { greedy, temperature };

// Greedy (default) or temperature sampling; stops at eos_id or after max_new
// tokens. Greedy decoding is deterministic: argmax ties resolve to the
// lowest token id.
template <class S>
std::vector<int> generate(const ModelWeightsT<S>& w, std::span<const int> prompt,
                          std::size_t max_new, const AdapterSetT<S>& adapters = {},
                          DecodeMode mode = DecodeMode::greedy, double temperature = 1.0,
                          Rng* rng = nullptr, int eos_id = -1) {
    if (max_new == 0) {
        throw UsageError("generate: max_new must be >= 1");
    }
    if (prompt.size() + max_new > w.config.max_seq_len) {
        throw ValidationError("generate: prompt length " + std::to_string(prompt.size()) +
                              " plus max_new " + std::to_string(max_new) + " exceeds max_seq_len " +
                              std::to_string(w.config.max_seq_len));
    }
    if (mode == DecodeMode::temperature && (rng == nullptr || temperature <= 0.0)) {
        throw UsageError("generate: temperature sampling needs an rng and temperature > 0");
    }
    std::vector<int> out(prompt.begin(), prompt.end());
    const std::size_t v = w.config.vocab_size;
    for (std::size_t step = 0; step < max_new; ++step) {
        Tensor<S> logits = forward(w, out, adapters);
        const S* row = &logits.values()[(out.size() - 1) * v];
        int next = 0;
        if (mode == DecodeMode::greedy) {
            for (std::size_t j = 1; j < v; ++j) {
                if (row[j] > row[next]) {
                    next = static_cast<int>(j);
                }
            }
        } else {
            std::vector<double> p(v);
            double mx = row[0];
            for (std::size_t j = 1; j < v; ++j) {
                mx = std::max(mx, static_cast<double>(row[j]));
            }
            double total = 0;
            for (std::size_t j = 0; j < v; ++j) {
                p[j] = std::exp((static_cast<double>(row[j]) - mx) / temperature);
                total += p[j];
            }
            double u = rng->uniform() * total;
            double acc = 0;
            next = static_cast<int>(v) - 1;
            for (std::size_t j = 0; j < v; ++j) {
                acc += p[j];
                if (u < acc) {
                    next = static_cast<int>(j);
                    break;
                }
            }
        }
        out.push_back(next);
        if (next == eos_id) {
            break;
        }
    }
    return out;
}

// Per-position log-probabilities: log_softmax of the forward logits.
template <class S>
Tensor<S> token_logprobs(const ModelWeightsT<S>& w, std::span<const int> tokens,
                         const AdapterSetT<S>& adapters = {}) {
    Tensor<S> logits = forward(w, tokens, adapters);
    const std::size_t m = logits.dim(0), v = logits.dim(1);
    std::vector<S> out(logits.numel());
    const auto& lv = logits.values();
    for (std::size_t i = 0; i < m; ++i) {
        const S* row = &lv[i * v];
        S mx = row[0];
        for (std::size_t j = 1; j < v; ++j) {
            mx = std::max(mx, row[j]);
        }
        S sum_exp = 0;
        for (std::size_t j = 0; j < v; ++j) {
            sum_exp += std::exp(row[j] - mx);
        }
        const S lse = std::log(sum_exp) + mx;
        for (std::size_t j = 0; j < v; ++j) {
            out[i * v + j] = row[j] - lse;
        }
    }
    return Tensor<S>::from_data({m, v}, std::move(out));
}

} // namespace peftkit
