#pragma once

#include <cstdint>
#include <vector>

#include "peftkit/prompt.hpp"
#include "peftkit/tokenizer.hpp"

namespace peftkit {

// A right-padded token matrix with next-token labels. Labels carry
// ignore_index everywhere except positions whose target is a response token
// or the closing eos, so the loss is computed on the response only.
struct Batch {
    static constexpr int ignore_index = -100;

    std::size_t batch_size = 0;
    std::size_t max_len = 0;
    std::vector<int> tokens;          // [batch_size x max_len]
    std::vector<int> labels;          // [batch_size x max_len]
    std::vector<std::uint8_t> mask;   // 1 where labels != ignore_index
    std::vector<std::size_t> lengths; // un-padded length per row

    const int* row_tokens(std::size_t r) const { return &tokens[r * max_len]; }
    const int* row_labels(std::size_t r) const { return &labels[r * max_len]; }
};

// Sequences longer than max_tokens lose tokens from the left of the prompt
// region; the response (and bos/eos) is never truncated. A response that
// cannot fit on its own rejects the example.
Batch build_batch(const std::vector<InstructionExample>& examples, const Tokenizer& tokenizer,
                  std::size_t max_tokens, const PromptTemplate& tmpl = PromptTemplate::standard());

} // namespace peftkit
