#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "peftkit/adapter.hpp"
#include "peftkit/adapter_io.hpp"
#include "peftkit/forward.hpp"
#include "peftkit/model.hpp"
#include "peftkit/optim.hpp"

using namespace peftkit;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 32;
    c.dim = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.max_seq_len = 32;
    c.ffn_hidden = 24;
    return c;
}

std::string temp_path(const std::string& name) {
    return std::string("peftkit_test_") + name;
}

std::vector<unsigned char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                      std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

// x (W0 + scaling * down up) by explicit dense loops
std::vector<float> dense_merge_oracle(const std::vector<float>& x, const std::vector<float>& w0,
                                      const std::vector<float>& down, const std::vector<float>& up,
                                      std::size_t m, std::size_t d, std::size_t k, std::size_t r,
                                      float scaling) {
    std::vector<float> merged(w0);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            float acc = 0.0f;
            for (std::size_t p = 0; p < r; ++p) {
                acc += down[i * r + p] * up[p * k + j];
            }
            merged[i * k + j] += scaling * acc;
        }
    }
    std::vector<float> out(m * k, 0.0f);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t p = 0; p < d; ++p) {
                out[i * k + j] += x[i * d + p] * merged[p * k + j];
            }
        }
    }
    return out;
}

} // namespace

TEST_CASE("lora_apply: zero up-matrix and zero alpha reproduce the base output") {
    Rng rng(1);
    Tensor<float> x = Tensor<float>::randn({3, 4}, rng, 1.0);
    Tensor<float> w0 = Tensor<float>::randn({4, 4}, rng, 1.0);
    LoraEntryT<float> entry;
    entry.down = Tensor<float>::randn({4, 2}, rng, 1.0, true);
    entry.up = Tensor<float>::zeros({2, 4}, true);

    const Tensor<float> base = matmul(x, w0);
    const Tensor<float> adapted = lora_apply(x, w0, &entry, 8.0f / 2.0f);
    for (std::size_t i = 0; i < base.numel(); ++i) {
        CHECK(adapted.values()[i] == base.values()[i]);
    }

    // alpha = 0 with a non-zero up-matrix
    for (auto& v : entry.up.values_mut()) {
        v = 0.5f;
    }
    const Tensor<float> zero_alpha = lora_apply(x, w0, &entry, 0.0f);
    for (std::size_t i = 0; i < base.numel(); ++i) {
        CHECK(zero_alpha.values()[i] == base.values()[i]);
    }
}

TEST_CASE("lora_apply matches the dense merge oracle") {
    Rng rng(2);
    const std::size_t m = 3, d = 4, k = 4, r = 2;
    const float alpha = 8.0f, scaling = alpha / static_cast<float>(r);
    Tensor<float> x = Tensor<float>::randn({m, d}, rng, 1.0);
    Tensor<float> w0 = Tensor<float>::randn({d, k}, rng, 1.0);
    LoraEntryT<float> entry;
    entry.down = Tensor<float>::randn({d, r}, rng, 1.0, true);
    entry.up = Tensor<float>::randn({r, k}, rng, 1.0, true);

    const std::vector<float> expect = dense_merge_oracle(
        x.values(), w0.values(), entry.down.values(), entry.up.values(), m, d, k, r, scaling);
    const Tensor<float> got = lora_apply(x, w0, &entry, scaling);
    for (std::size_t i = 0; i < expect.size(); ++i) {
        CHECK(std::abs(got.values()[i] - expect[i]) <= 1e-5f);
    }
}

TEST_CASE("lora_apply rejects mismatched entries") {
    Rng rng(3);
    Tensor<float> x = Tensor<float>::randn({2, 4}, rng, 1.0);
    Tensor<float> w0 = Tensor<float>::randn({4, 4}, rng, 1.0);
    LoraEntryT<float> entry;
    entry.down = Tensor<float>::randn({3, 2}, rng, 1.0);
    entry.up = Tensor<float>::randn({2, 4}, rng, 1.0);
    CHECK_THROWS_AS(lora_apply(x, w0, &entry, 1.0f), CompatError);
}

TEST_CASE("lora_merge: fresh adapter gives a bitwise-equal model") {
    Rng rng(4);
    ModelWeights w = init_weights<float>(tiny_config(), rng);
    LoraAdapter lora = init_lora<float>(w.config, LoraHyper{4, 16.0f}, rng);
    const ModelWeights merged = lora_merge(w, lora);
    const auto a = tensor_digests(w);
    const auto b = tensor_digests(merged);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].second == b[i].second);
    }
}

TEST_CASE("lora_merge: merged-path logits equal adapter-path logits") {
    Rng rng(5);
    ModelWeights w = init_weights<float>(tiny_config(), rng);
    LoraAdapter lora = init_lora<float>(w.config, LoraHyper{4, 16.0f}, rng);
    // fill the adapter with non-trivial values without a training loop
    for (auto& layer : lora.layers) {
        for (auto& e : layer) {
            for (auto& v : e.up.values_mut()) {
                v = static_cast<float>(rng.gauss() * 0.05);
            }
        }
    }
    const ModelWeights merged = lora_merge(w, lora);
    AdapterSet set;
    set.lora = &lora;
    for (int trial = 0; trial < 16; ++trial) {
        std::vector<int> tokens(4 + trial % 5);
        for (auto& t : tokens) {
            t = static_cast<int>(rng.uniform_below(w.config.vocab_size));
        }
        const Tensor<float> via_adapter = forward(w, tokens, set);
        const Tensor<float> via_merge = forward(merged, tokens);
        for (std::size_t i = 0; i < via_adapter.numel(); ++i) {
            REQUIRE(std::abs(via_adapter.values()[i] - via_merge.values()[i]) <= 1e-5f);
        }
    }
}

TEST_CASE("lora_merge then subtracting the update recovers the base matrix") {
    Rng rng(6);
    ModelWeights w = init_weights<float>(tiny_config(), rng);
    LoraAdapter lora = init_lora<float>(w.config, LoraHyper{4, 16.0f}, rng);
    for (auto& layer : lora.layers) {
        for (auto& e : layer) {
            for (auto& v : e.up.values_mut()) {
                v = static_cast<float>(rng.gauss() * 0.05);
            }
        }
    }
    const ModelWeights merged = lora_merge(w, lora);
    const float scaling = lora.scaling();
    const std::size_t c = w.config.dim;
    for (std::size_t l = 0; l < w.config.n_layers; ++l) {
        const LoraEntryT<float>* e = lora.entry(l, LoraTarget::q);
        REQUIRE(e != nullptr);
        const auto& down = e->down.values();
        const auto& up = e->up.values();
        const std::size_t r = lora.rank;
        for (std::size_t i = 0; i < c; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                float delta = 0.0f;
                for (std::size_t p = 0; p < r; ++p) {
                    delta += down[i * r + p] * up[p * c + j];
                }
                const float recovered = merged.layers[l].wq.values()[i * c + j] - scaling * delta;
                CHECK(std::abs(recovered - w.layers[l].wq.values()[i * c + j]) <= 1e-6f);
            }
        }
    }
}

TEST_CASE("lora_merge rejects mismatched configs and the cli refuses prefixes") {
    Rng rng(7);
    ModelWeights w = init_weights<float>(tiny_config(), rng);
    ModelConfig other = tiny_config();
    other.vocab_size = 64;
    LoraAdapter lora = init_lora<float>(other, LoraHyper{2, 4.0f}, rng);
    CHECK_THROWS_AS(lora_merge(w, lora), CompatError);
}

TEST_CASE("prefix attention: hand evaluation of the gated equations") {
    // one scalar head, K = 2 prompt tokens, M = 3 context tokens plus the
    // current token; everything evaluated by explicit formulas in 64-bit
    const std::size_t c = 4, kp = 2, m = 4;
    Rng rng(8);
    Tensor<double> x = Tensor<double>::randn({m, c}, rng, 0.8);
    Tensor<double> prompts = Tensor<double>::randn({kp, c}, rng, 0.8);
    Tensor<double> wq = Tensor<double>::randn({c, c}, rng, 0.5);
    Tensor<double> wk = Tensor<double>::randn({c, c}, rng, 0.5);
    Tensor<double> wv = Tensor<double>::randn({c, c}, rng, 0.5);
    Tensor<double> wo = Tensor<double>::randn({c, c}, rng, 0.5);
    const double gate = 0.37;
    Tensor<double> gates = Tensor<double>::from_data({1}, {gate});

    auto matvec = [&](const std::vector<double>& mat, const double* vec, double* out) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j] = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
                out[j] += vec[i] * mat[i * c + j];
            }
        }
    };

    // hand evaluation for the last token (index m-1 attends over everything)
    std::vector<double> q(c), keys(m * c), vals(m * c), pkeys(kp * c), pvals(kp * c);
    matvec(wq.values(), &x.values()[(m - 1) * c], q.data());
    for (std::size_t i = 0; i < m; ++i) {
        matvec(wk.values(), &x.values()[i * c], &keys[i * c]);
        matvec(wv.values(), &x.values()[i * c], &vals[i * c]);
    }
    for (std::size_t p = 0; p < kp; ++p) {
        matvec(wk.values(), &prompts.values()[p * c], &pkeys[p * c]);
        matvec(wv.values(), &prompts.values()[p * c], &pvals[p * c]);
    }
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(c));
    std::vector<double> s_prefix(kp), s_orig(m);
    for (std::size_t p = 0; p < kp; ++p) {
        double dot = 0.0;
        for (std::size_t d = 0; d < c; ++d) {
            dot += q[d] * pkeys[p * c + d];
        }
        s_prefix[p] = dot * inv_scale;
    }
    for (std::size_t j = 0; j < m; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < c; ++d) {
            dot += q[d] * keys[j * c + d];
        }
        s_orig[j] = dot * inv_scale;
    }
    auto softmax_inplace = [](std::vector<double>& v) {
        double mx = v[0];
        for (double e : v) {
            mx = std::max(mx, e);
        }
        double total = 0.0;
        for (double& e : v) {
            e = std::exp(e - mx);
            total += e;
        }
        for (double& e : v) {
            e /= total;
        }
    };
    softmax_inplace(s_prefix);
    softmax_inplace(s_orig);
    std::vector<double> mixed(c, 0.0);
    for (std::size_t p = 0; p < kp; ++p) {
        for (std::size_t d = 0; d < c; ++d) {
            mixed[d] += gate * s_prefix[p] * pvals[p * c + d];
        }
    }
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t d = 0; d < c; ++d) {
            mixed[d] += s_orig[j] * vals[j * c + d];
        }
    }
    std::vector<double> expect(c);
    matvec(wo.values(), mixed.data(), expect.data());

    // implementation path: projections, gated attention, output projection
    Tensor<double> ctx = causal_attention(matmul(x, wq), matmul(x, wk), matmul(x, wv),
                                          /*n_heads=*/1, matmul(prompts, wk),
                                          matmul(prompts, wv), gates);
    Tensor<double> out = matmul(ctx, wo);
    for (std::size_t d = 0; d < c; ++d) {
        CHECK(std::abs(out.values()[(m - 1) * c + d] - expect[d]) <= 1e-10);
    }
}

TEST_CASE("prefix attention: zero gate reproduces base attention exactly") {
    Rng rng(9);
    const std::size_t c = 8, m = 5, kp = 3;
    Tensor<float> q = Tensor<float>::randn({m, c}, rng, 1.0);
    Tensor<float> k = Tensor<float>::randn({m, c}, rng, 1.0);
    Tensor<float> v = Tensor<float>::randn({m, c}, rng, 1.0);
    Tensor<float> pk = Tensor<float>::randn({kp, c}, rng, 1.0);
    Tensor<float> pv = Tensor<float>::randn({kp, c}, rng, 1.0);
    Tensor<float> gates = Tensor<float>::zeros({2});

    const Tensor<float> base = causal_attention(q, k, v, 2);
    const Tensor<float> gated = causal_attention(q, k, v, 2, pk, pv, gates);
    for (std::size_t i = 0; i < base.numel(); ++i) {
        CHECK(gated.values()[i] == base.values()[i]);
    }
}

TEST_CASE("prefix attention: combined row mass is 1 + gate") {
    Rng rng(10);
    const std::size_t c = 8, m = 6, kp = 2;
    Tensor<float> q = Tensor<float>::randn({m, c}, rng, 1.0);
    Tensor<float> k = Tensor<float>::randn({m, c}, rng, 1.0);
    Tensor<float> v = Tensor<float>::randn({m, c}, rng, 1.0);
    Tensor<float> pk = Tensor<float>::randn({kp, c}, rng, 1.0);
    Tensor<float> pv = Tensor<float>::randn({kp, c}, rng, 1.0);
    Tensor<float> gates = Tensor<float>::from_data({2}, {0.6f, -0.25f});

    AttentionTrace trace;
    causal_attention(q, k, v, 2, pk, pv, gates, &trace);
    REQUIRE(trace.calls.size() == 1);
    const auto& call = trace.calls[0];
    for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t i = 0; i < m; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < kp + m; ++j) {
                total += call.weight(h, i, j);
            }
            CHECK(total ==
                  doctest::Approx(1.0 + static_cast<double>(gates.values()[h])).epsilon(1e-5));
        }
    }
}

TEST_CASE("init_adapter: invariants and seed behaviour") {
    const ModelConfig config = tiny_config();
    Rng rng_a(42);
    LoraAdapter lora_a = init_lora<float>(config, LoraHyper{4, 16.0f}, rng_a);
    for (const auto& layer : lora_a.layers) {
        for (const auto& e : layer) {
            for (float v : e.up.values()) {
                REQUIRE(v == 0.0f);
            }
        }
    }
    Rng rng_p(42);
    PrefixAdapter prefix = init_prefix<float>(config, PrefixHyper{3, 2}, rng_p);
    for (const auto& g : prefix.gates) {
        for (float v : g.values()) {
            REQUIRE(v == 0.0f);
        }
    }

    // same seed twice: identical; different seeds: different down, same logits
    Rng r1(7), r2(7), r3(8);
    LoraAdapter a1 = init_lora<float>(config, LoraHyper{4, 16.0f}, r1);
    LoraAdapter a2 = init_lora<float>(config, LoraHyper{4, 16.0f}, r2);
    LoraAdapter a3 = init_lora<float>(config, LoraHyper{4, 16.0f}, r3);
    CHECK(a1.layers[0][0].down.values() == a2.layers[0][0].down.values());
    CHECK(a1.layers[0][0].down.values() != a3.layers[0][0].down.values());

    Rng wrng(1);
    ModelWeights w = init_weights<float>(config, wrng);
    const std::vector<int> tokens{1, 2, 3, 4};
    AdapterSet s1, s3;
    s1.lora = &a1;
    s3.lora = &a3;
    const Tensor<float> l1 = forward(w, tokens, s1);
    const Tensor<float> l3 = forward(w, tokens, s3);
    CHECK(l1.values() == l3.values());

    CHECK_THROWS_AS(init_lora<float>(config, LoraHyper{0, 1.0f}, r1), ConfigError);
    CHECK_THROWS_AS(init_prefix<float>(config, PrefixHyper{2, 99}, r1), ConfigError);
}

TEST_CASE("trainable parameter accounting reproduces the full-scale figures") {
    const ModelConfig ref = ModelConfig::reference_full_scale();
    CHECK(lora_trainable_count(ref, 16, 2) == 8388608u);
    CHECK(lora_trainable_count(ref, 8, 2) == 4194304u);
    CHECK(prefix_trainable_count(ref, 10, 30, true) == 1229760u);
    // doubling the rank doubles the count
    CHECK(lora_trainable_count(ref, 16, 2) == 2 * lora_trainable_count(ref, 8, 2));

    const ModelConfig config = tiny_config();
    Rng rng(1);
    LoraAdapter lora = init_lora<float>(config, LoraHyper{4, 16.0f}, rng);
    CHECK(count_trainable(lora) == lora_trainable_count(config, 4, 2));
    PrefixAdapter prefix = init_prefix<float>(config, PrefixHyper{3, 2}, rng);
    CHECK(count_trainable(prefix) == prefix_trainable_count(config, 3, 2, true));
}

TEST_CASE("count_trainable equals the scalars moved by a probe step") {
    const ModelConfig config = tiny_config();
    Rng rng(2);
    for (int which = 0; which < 2; ++which) {
        std::vector<Tensor<float>> params;
        std::size_t expected = 0;
        LoraAdapter lora;
        PrefixAdapter prefix;
        if (which == 0) {
            lora = init_lora<float>(config, LoraHyper{4, 16.0f}, rng);
            params = trainable_params(lora);
            expected = count_trainable(lora);
        } else {
            prefix = init_prefix<float>(config, PrefixHyper{3, 2}, rng);
            params = trainable_params(prefix);
            expected = count_trainable(prefix);
        }
        std::vector<std::vector<float>> before;
        for (auto& p : params) {
            before.push_back(p.values());
            auto& g = p.grad_mut();
            std::fill(g.begin(), g.end(), 1.0f);
        }
        AdamWOptions opt;
        opt.learning_rate = 0.1;
        AdamW<float> optimizer(params, opt);
        optimizer.step();
        std::size_t moved = 0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            for (std::size_t j = 0; j < params[i].numel(); ++j) {
                moved += params[i].values()[j] != before[i][j] ? 1 : 0;
            }
        }
        CHECK(moved == expected);
    }
}

TEST_CASE("adapter files: round trip is byte-identical for both kinds") {
    const ModelConfig config = tiny_config();
    Rng rng(3);
    LoraAdapter lora = init_lora<float>(config, LoraHyper{4, 16.0f}, rng);
    for (auto& layer : lora.layers) {
        for (auto& e : layer) {
            for (auto& v : e.up.values_mut()) {
                v = static_cast<float>(rng.gauss());
            }
        }
    }
    PrefixAdapter prefix = init_prefix<float>(config, PrefixHyper{3, 2}, rng);

    const std::string lora_path = temp_path("lora.peft");
    const std::string prefix_path = temp_path("prefix.peft");
    save_adapter(lora, lora_path);
    save_adapter(prefix, prefix_path);

    LoadedAdapter lora_loaded = load_adapter(lora_path, config);
    REQUIRE(lora_loaded.kind == AdapterKind::lora);
    LoadedAdapter prefix_loaded = load_adapter(prefix_path, config);
    REQUIRE(prefix_loaded.kind == AdapterKind::prefix);

    const std::string lora_path2 = temp_path("lora2.peft");
    const std::string prefix_path2 = temp_path("prefix2.peft");
    save_adapter(*lora_loaded.lora, lora_path2);
    save_adapter(*prefix_loaded.prefix, prefix_path2);

    CHECK(slurp(lora_path) == slurp(lora_path2));
    CHECK(slurp(prefix_path) == slurp(prefix_path2));

    std::remove(lora_path.c_str());
    std::remove(lora_path2.c_str());
    std::remove(prefix_path.c_str());
    std::remove(prefix_path2.c_str());
}

TEST_CASE("adapter files: corruption and mismatches are rejected") {
    const ModelConfig config = tiny_config();
    Rng rng(4);
    LoraAdapter lora = init_lora<float>(config, LoraHyper{4, 16.0f}, rng);
    const std::string path = temp_path("corrupt.peft");
    save_adapter(lora, path);

    // flip one payload byte deep in the file
    std::vector<unsigned char> bytes = slurp(path);
    bytes[bytes.size() / 2] ^= 0x40;
    spit(path, bytes);
    CHECK_THROWS_AS(load_adapter(path, config), FormatError);

    // corrupt the magic
    bytes = slurp(path);
    bytes[bytes.size() / 2] ^= 0x40; // restore payload
    bytes[0] = 'X';
    spit(path, bytes);
    CHECK_THROWS_AS(load_adapter(path, config), FormatError);

    // truncate
    save_adapter(lora, path);
    bytes = slurp(path);
    bytes.resize(bytes.size() - 9);
    spit(path, bytes);
    CHECK_THROWS_AS(load_adapter(path, config), FormatError);

    // digest mismatch: same file, different config
    save_adapter(lora, path);
    ModelConfig other = config;
    other.ffn_hidden += 1;
    CHECK_THROWS_AS(load_adapter(path, other), CompatError);

    std::remove(path.c_str());
}

TEST_CASE("base checkpoints round trip through the same container") {
    const ModelConfig config = tiny_config();
    Rng rng(5);
    ModelWeights w = init_weights<float>(config, rng);
    const std::string path = temp_path("base.peft");
    save_base_weights(w, path);

    const AdapterFileContents raw = read_adapter_file(path);
    CHECK(raw.kind == AdapterKind::base_model);

    ModelWeights loaded = load_base_weights(path);
    CHECK(loaded.config == config);
    const auto a = tensor_digests(w);
    const auto b = tensor_digests(loaded);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].second == b[i].second);
    }

    // a base checkpoint is not an adapter
    CHECK_THROWS_AS(load_adapter(path, config), FormatError);
    std::remove(path.c_str());
}
