#include "peftkit/batch.hpp"

#include <algorithm>

#include "peftkit/error.hpp"

namespace peftkit {

Batch build_batch(const std::vector<InstructionExample>& examples, const Tokenizer& tokenizer,
                  std::size_t max_tokens, const PromptTemplate& tmpl) {
    if (examples.empty()) {
        throw UsageError("build_batch: empty example list");
    }
    if (max_tokens < 3) {
        throw ConfigError("build_batch: max_tokens must be at least 3");
    }

    struct Row {
        std::vector<int> tokens;
        std::size_t output_start;
    };
    std::vector<Row> rows;
    rows.reserve(examples.size());
    std::size_t max_len = 0;

    for (std::size_t i = 0; i < examples.size(); ++i) {
        PromptRendering r = render_prompt(examples[i], tokenizer, tmpl);
        const std::size_t response_len = r.tokens.size() - r.output_start; // includes eos
        if (response_len + 2 > max_tokens) { // bos + at least one prompt token must fit
            throw DataError("example " + std::to_string(i) + ": response of " +
                            std::to_string(response_len) + " tokens cannot fit within max_tokens " +
                            std::to_string(max_tokens));
        }
        if (r.tokens.size() > max_tokens) {
            // drop from the left of the prompt region, keeping bos
            const std::size_t excess = r.tokens.size() - max_tokens;
            r.tokens.erase(r.tokens.begin() + 1, r.tokens.begin() + 1 + excess);
            r.output_start -= excess;
        }
        max_len = std::max(max_len, r.tokens.size());
        rows.push_back(Row{std::move(r.tokens), r.output_start});
    }

    Batch b;
    b.batch_size = rows.size();
    b.max_len = max_len;
    b.tokens.assign(b.batch_size * max_len, Tokenizer::pad_id);
    b.labels.assign(b.batch_size * max_len, Batch::ignore_index);
    b.mask.assign(b.batch_size * max_len, 0);
    b.lengths.resize(b.batch_size);

    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& row = rows[r];
        b.lengths[r] = row.tokens.size();
        std::copy(row.tokens.begin(), row.tokens.end(), b.tokens.begin() + r * max_len);
        // position i predicts token i+1; supervise positions whose target is
        // a response token or the eos
        for (std::size_t i = row.output_start - 1; i + 1 < row.tokens.size(); ++i) {
            b.labels[r * max_len + i] = row.tokens[i + 1];
            b.mask[r * max_len + i] = 1;
        }
    }
    return b;
}

} // namespace peftkit
