#pragma once

#include <optional>
#include <string>
#include <vector>

#include "peftkit/prompt.hpp"

namespace peftkit {

enum class InstructionMix { pl, pl_nl };

// Line-delimited JSON records with instruction / input (optional) / output.
// Malformed records fail with the 1-based line number in the message.
std::vector<InstructionExample> load_instruction_file(const std::string& path);

// mix == pl loads only the code-domain file; pl_nl concatenates the
// code-domain file with the natural-language file, in that order.
std::vector<InstructionExample> load_instruction_dataset(const std::string& pl_path,
                                                         const std::string& nl_path,
                                                         InstructionMix mix);

enum class ReviewTask { necessity, comment_gen, refinement };

const char* review_task_name(ReviewTask t); // "rnp" / "rcg" / "cr"
ReviewTask review_task_from_name(const std::string& name);

enum class LangLabelPlacement { none, instruction, input };

// One code-review record. `code` is the PL input for every task; refinement
// records additionally carry the revised code in `target`.
struct ReviewExample {
    ReviewTask task = ReviewTask::necessity;
    std::string code;
    std::optional<std::string> comment; // input for refinement, target for comment generation
    std::optional<int> label;           // necessity target; 1 = requires a review
    std::optional<std::string> target;  // refinement target (revised PL)
    std::optional<std::string> lang;
};

// Line-delimited JSON with fields task, code, comment, label, target, lang;
// every record must match `expected_task` and carry that task's fields.
std::vector<ReviewExample> load_task_dataset(const std::string& path, ReviewTask expected_task);

} // namespace peftkit
