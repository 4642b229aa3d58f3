#include "peftkit/prompt.hpp"

#include "peftkit/error.hpp"

namespace peftkit {

namespace {

std::string replace_all(std::string text, const std::string& needle, const std::string& value) {
    std::size_t pos = 0;
    while ((pos = text.find(needle, pos)) != std::string::npos) {
        text.replace(pos, needle.size(), value);
        pos += value.size();
    }
    return text;
}

} // namespace

PromptTemplate PromptTemplate::standard() {
    PromptTemplate t;
    t.with_input =
        "Below is an instruction that describes a task, paired with an input that provides "
        "further context. Write a response that appropriately completes the request.\n\n"
        "### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n";
    t.without_input =
        "Below is an instruction that describes a task. Write a response that appropriately "
        "completes the request.\n\n### Instruction:\n{instruction}\n\n### Response:\n";
    return t;
}

std::string PromptTemplate::render_prompt_text(const InstructionExample& example) const {
    if (example.instruction.empty()) {
        throw ValidationError("instruction example has an empty instruction");
    }
    if (example.input.empty()) {
        return replace_all(without_input, "{instruction}", example.instruction);
    }
    std::string text = replace_all(with_input, "{instruction}", example.instruction);
    return replace_all(text, "{input}", example.input);
}

PromptRendering render_prompt(const InstructionExample& example, const Tokenizer& tokenizer,
                              const PromptTemplate& tmpl) {
    if (example.output.empty()) {
        throw ValidationError("instruction example has an empty output");
    }
    PromptRendering r;
    const std::string prompt_text = tmpl.render_prompt_text(example);
    r.full_text = prompt_text + example.output;

    const std::vector<int> prompt_tokens = tokenizer.encode(prompt_text);
    const std::vector<int> output_tokens = tokenizer.encode(example.output);
    r.tokens.reserve(prompt_tokens.size() + output_tokens.size() + 2);
    r.tokens.push_back(Tokenizer::bos_id);
    r.tokens.insert(r.tokens.end(), prompt_tokens.begin(), prompt_tokens.end());
    r.output_start = r.tokens.size();
    r.tokens.insert(r.tokens.end(), output_tokens.begin(), output_tokens.end());
    r.tokens.push_back(Tokenizer::eos_id);
    return r;
}

} // namespace peftkit
