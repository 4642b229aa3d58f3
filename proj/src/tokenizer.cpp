#include "peftkit/tokenizer.hpp"

#include <fstream>
#include <limits>
#include <map>

#include <nlohmann/json.hpp>

#include "peftkit/error.hpp"

namespace peftkit {

namespace {

std::uint64_t pair_key(int left, int right) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) |
           static_cast<std::uint32_t>(right);
}

std::vector<int> bytes_to_ids(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char b : text) {
        ids.push_back(Tokenizer::byte_offset + static_cast<int>(b));
    }
    return ids;
}

// Replaces every non-overlapping (left, right) occurrence, left to right.
void merge_pair(std::vector<int>& ids, int left, int right, int fused) {
    std::size_t w = 0;
    for (std::size_t r = 0; r < ids.size();) {
        if (r + 1 < ids.size() && ids[r] == left && ids[r + 1] == right) {
            ids[w++] = fused;
            r += 2;
        } else {
            ids[w++] = ids[r++];
        }
    }
    ids.resize(w);
}

} // namespace

void Tokenizer::add_merge(int left, int right) {
    merge_rank_[pair_key(left, right)] = static_cast<int>(merges_.size());
    merges_.emplace_back(left, right);
}

void Tokenizer::finish_build() {
    piece_.assign(static_cast<std::size_t>(first_merge_id) + merges_.size(), {});
    for (int b = 0; b < 256; ++b) {
        piece_[static_cast<std::size_t>(byte_offset + b)] = std::string(1, static_cast<char>(b));
    }
    for (std::size_t i = 0; i < merges_.size(); ++i) {
        const auto [l, r] = merges_[i];
        const std::size_t id = static_cast<std::size_t>(first_merge_id) + i;
        if (l < byte_offset || r < byte_offset || static_cast<std::size_t>(l) >= id ||
            static_cast<std::size_t>(r) >= id) {
            throw FormatError("tokenizer merge " + std::to_string(i) + " references invalid ids");
        }
        piece_[id] = piece_[static_cast<std::size_t>(l)] + piece_[static_cast<std::size_t>(r)];
    }
    yes_token_ = single_token("yes");
    no_token_ = single_token("no");
}

void Tokenizer::apply_merges(std::vector<int>& ids) const {
    while (ids.size() >= 2) {
        int best_rank = std::numeric_limits<int>::max();
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
            auto it = merge_rank_.find(pair_key(ids[i], ids[i + 1]));
            if (it != merge_rank_.end() && it->second < best_rank) {
                best_rank = it->second;
            }
        }
        if (best_rank == std::numeric_limits<int>::max()) {
            break;
        }
        const auto [l, r] = merges_[static_cast<std::size_t>(best_rank)];
        merge_pair(ids, l, r, first_merge_id + best_rank);
    }
}

Tokenizer Tokenizer::train(const std::vector<std::string>& corpus, std::size_t vocab_size) {
    if (vocab_size < min_vocab_size) {
        throw ConfigError("tokenizer vocab_size " + std::to_string(vocab_size) +
                          " is below the minimum of " + std::to_string(min_vocab_size));
    }
    Tokenizer tok;

    std::vector<std::vector<int>> seqs;
    seqs.reserve(corpus.size());
    for (const std::string& text : corpus) {
        seqs.push_back(bytes_to_ids(text));
    }

    auto apply_new_merge = [&](int left, int right) {
        const int fused = first_merge_id + static_cast<int>(tok.merges_.size());
        tok.add_merge(left, right);
        for (auto& seq : seqs) {
            merge_pair(seq, left, right, fused);
        }
    };

    // label tokens must exist as single tokens regardless of the corpus
    const int y = byte_offset + 'y', e = byte_offset + 'e', s = byte_offset + 's';
    const int n = byte_offset + 'n', o = byte_offset + 'o';
    apply_new_merge(y, e);            // "ye"
    apply_new_merge(first_merge_id, s); // "yes"
    apply_new_merge(n, o);             // "no"

    const std::size_t max_merges = vocab_size - static_cast<std::size_t>(first_merge_id);
    while (tok.merges_.size() < max_merges) {
        std::map<std::pair<int, int>, std::size_t> counts;
        for (const auto& seq : seqs) {
            for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
                ++counts[{seq[i], seq[i + 1]}];
            }
        }
        std::pair<int, int> best{-1, -1};
        std::size_t best_count = 1; // a pair must appear at least twice to be worth a merge
        for (const auto& [pair, count] : counts) {
            if (count > best_count) {
                best = pair;
                best_count = count;
            }
        }
        if (best.first < 0) {
            break;
        }
        apply_new_merge(best.first, best.second);
    }

    tok.finish_build();
    return tok;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids = bytes_to_ids(text);
    apply_merges(ids);
    return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        if (id == pad_id || id == bos_id || id == eos_id) {
            continue;
        }
        if (id < byte_offset || static_cast<std::size_t>(id) >= piece_.size()) {
            throw FormatError("decode: unknown token id " + std::to_string(id));
        }
        out += piece_[static_cast<std::size_t>(id)];
    }
    return out;
}

int Tokenizer::single_token(std::string_view s) const {
    const std::vector<int> ids = encode(s);
    return ids.size() == 1 ? ids[0] : -1;
}

void Tokenizer::save(const std::string& path) const {
    nlohmann::json j;
    j["version"] = 1;
    j["merges"] = nlohmann::json::array();
    for (const auto& [l, r] : merges_) {
        j["merges"].push_back({l, r});
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write tokenizer file: " + path);
    }
    out << j.dump() << "\n";
}

Tokenizer Tokenizer::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open tokenizer file: " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("tokenizer file " + path + " is not valid json: " + e.what());
    }
    if (!j.contains("version") || j["version"] != 1 || !j.contains("merges") ||
        !j["merges"].is_array()) {
        throw FormatError("tokenizer file " + path + " has an unsupported layout");
    }
    Tokenizer tok;
    for (const auto& m : j["merges"]) {
        if (!m.is_array() || m.size() != 2 || !m[0].is_number_integer() ||
            !m[1].is_number_integer()) {
            throw FormatError("tokenizer file " + path + " has a malformed merge entry");
        }
        tok.add_merge(m[0].get<int>(), m[1].get<int>());
    }
    tok.finish_build();
    return tok;
}

} // namespace peftkit
