#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "peftkit/tokenizer.hpp"

namespace peftkit {

// One {instruction, input (optional), output} record.
struct InstructionExample {
    std::string instruction;
    std::string input; // empty = absent
    std::string output;
};

// The instruction-following template. The wording is configurable; both
// variants must end where the response begins.
struct PromptTemplate {
    std::string with_input;
    std::string without_input;

    static PromptTemplate standard();

    // Substitutes {instruction} / {input} and returns the text up to and
    // including the response marker.
    std::string render_prompt_text(const InstructionExample& example) const;
};

struct PromptRendering {
    std::string full_text;   // prompt text followed by the response
    std::vector<int> tokens; // [bos, prompt tokens..., response tokens..., eos]
    std::size_t output_start; // index of the first response token
};

// The prompt and the response are encoded separately so that no BPE merge can
// straddle the boundary: decode(tokens[output_start:]) is exactly the output.
PromptRendering render_prompt(const InstructionExample& example, const Tokenizer& tokenizer,
                              const PromptTemplate& tmpl = PromptTemplate::standard());

} // namespace peftkit
