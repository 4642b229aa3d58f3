#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace peftkit {

// Sentence-level BLEU-4: geometric mean of modified 1..4-gram precisions with
// add-epsilon smoothing on zero counts, times a brevity penalty
// exp(1 - |ref|/|hyp|) capped at 1. No unigram overlap (or an empty
// hypothesis) scores exactly 0.
struct BleuOptions {
    double epsilon = 1e-9;
};

double bleu4(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference,
             const BleuOptions& options = {});

// Corpus-level variant: n-gram matches and totals are pooled over all pairs
// before the geometric mean, with corpus-length brevity penalty.
double corpus_bleu4(const std::vector<std::vector<std::string>>& hypotheses,
                    const std::vector<std::vector<std::string>>& references,
                    const BleuOptions& options = {});

// Splits on whitespace; every non-alphanumeric, non-underscore character
// becomes its own token. Comments (natural language) are lowercased before
// splitting, code keeps its case.
std::vector<std::string> bleu_tokenize(std::string_view text, bool lowercase);

struct Prf1 {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool degenerate_precision = false; // no predicted positives
    bool degenerate_recall = false;    // no actual positives
};

// Binary precision/recall/F1 with 1 = positive ("requires a review"). Zero
// denominators yield 0 with the matching degenerate flag set.
Prf1 prf1(const std::vector<int>& predictions, const std::vector<int>& labels);

struct ThresholdPoint {
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t predicted_positive = 0;
};

// Evaluates prf1 at each grid threshold over p(positive) scores
// (predicted = score >= threshold).
std::vector<ThresholdPoint> threshold_sweep(const std::vector<double>& scores,
                                            const std::vector<int>& labels,
                                            const std::vector<double>& grid);

// 0.00, 0.01, ..., 1.00
std::vector<double> default_threshold_grid();

} // namespace peftkit
