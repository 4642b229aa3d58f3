#pragma once

#include <optional>
#include <string>
#include <vector>

#include "peftkit/dataset.hpp"
#include "peftkit/forward.hpp"
#include "peftkit/metrics.hpp"
#include "peftkit/prompt.hpp"
#include "peftkit/tokenizer.hpp"

namespace peftkit {

// Maps a review example onto the instruction format:
//   rnp: input = code, output = "yes"/"no"
//   rcg: input = code, output = the review comment
//   cr:  input = code plus the comment block, output = the revised code
// The optional language label lands in the instruction or the input.
InstructionExample to_instruction(const ReviewExample& example,
                                  LangLabelPlacement placement = LangLabelPlacement::none);

struct NecessityScore {
    double p_positive = 0.0; // P(yes) / (P(yes) + P(no)) at the first response token
    double threshold = 0.5;
    bool predicted = false; // p_positive >= threshold
};

NecessityScore necessity_score(const ModelWeights& weights, const AdapterSet& adapters,
                               const ReviewExample& example, const Tokenizer& tokenizer,
                               double threshold = 0.5,
                               const PromptTemplate& tmpl = PromptTemplate::standard(),
                               LangLabelPlacement placement = LangLabelPlacement::none);

struct EvalOptions {
    double threshold = 0.5;
    std::size_t max_new_tokens = 64;
    bool lowercase_comments = true; // BLEU tokenization of generated comments
    bool corpus_level_bleu = false; // pooled-count BLEU instead of the sentence mean
    LangLabelPlacement lang_label = LangLabelPlacement::none;
};

struct ExampleResult {
    std::size_t index = 0;
    // generation tasks
    std::string prediction;
    std::string reference;
    double bleu = 0.0;
    // necessity
    double p_positive = 0.0;
    int predicted = 0;
    int label = 0;
};

struct EvalReport {
    ReviewTask task = ReviewTask::necessity;
    std::size_t n_examples = 0;
    double threshold = 0.5;
    std::optional<double> bleu4;
    std::optional<Prf1> prf;
    std::vector<ThresholdPoint> threshold_curve; // necessity only
    std::vector<ExampleResult> examples;
};

// Greedy decoding, corpus-mean sentence BLEU-4 for the generation tasks;
// precision/recall/F1 at `threshold` plus the full curve for necessity.
EvalReport evaluate(const ModelWeights& weights, const AdapterSet& adapters,
                    const std::vector<ReviewExample>& dataset, ReviewTask task,
                    const EvalOptions& options, const Tokenizer& tokenizer,
                    const PromptTemplate& tmpl = PromptTemplate::standard());

// Line-delimited report: one "example" record per input, "threshold" records
// for the sweep, one final "summary" record.
void write_report(const EvalReport& report, const std::string& path);

// Re-reads a report file and returns it (used to check that the summary can
// be reproduced from the per-example records).
EvalReport read_report(const std::string& path);

} // namespace peftkit
