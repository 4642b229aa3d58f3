#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace peftkit {

// Reversible byte-level BPE tokenizer.
//
// Vocabulary layout: ids 0..2 are {pad, bos, eos}, ids 3..258 are the 256
// raw bytes, ids 259.. are learned merges. Every byte string round-trips
// exactly (decode(encode(s)) == s), and encoding plain text never produces a
// special token. The strings "yes" and "no" are forced to be single tokens
// so that label probabilities can be read off one position.
class Tokenizer {
public:
    static constexpr int pad_id = 0;
    static constexpr int bos_id = 1;
    static constexpr int eos_id = 2;
    static constexpr int byte_offset = 3;
    static constexpr int first_merge_id = 259;
    // specials + bytes + the three forced merges ("ye", "yes", "no")
    static constexpr std::size_t min_vocab_size = 262;

    Tokenizer() = default;

    // Learns up to vocab_size - 259 merges from the corpus by greedy pair
    // frequency; deterministic (ties break on the smaller pair).
    static Tokenizer train(const std::vector<std::string>& corpus, std::size_t vocab_size);

    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;

    // Total ids in use: 259 + number of merges.
    std::size_t vocab_size() const { return static_cast<std::size_t>(first_merge_id) + merges_.size(); }

    // Token id if `s` encodes to exactly one token, -1 otherwise.
    int single_token(std::string_view s) const;

    int yes_token() const { return yes_token_; }
    int no_token() const { return no_token_; }

    void save(const std::string& path) const;
    static Tokenizer load(const std::string& path);

    const std::vector<std::pair<int, int>>& merges() const { return merges_; }

private:
    void add_merge(int left, int right);
    void finish_build();
    void apply_merges(std::vector<int>& ids) const;

    std::vector<std::pair<int, int>> merges_;
    std::unordered_map<std::uint64_t, int> merge_rank_; // (left,right) -> merge index
    std::vector<std::string> piece_; // byte string per id; empty for specials
    int yes_token_ = -1;
    int no_token_ = -1;
};

} // namespace peftkit
