#include "peftkit/metrics.hpp"

#include <cctype>
#include <cmath>
#include <map>

#include "peftkit/error.hpp"

namespace peftkit {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts count_ngrams(const std::vector<std::string>& tokens, std::size_t n) {
    NgramCounts counts;
    if (tokens.size() < n) {
        return counts;
    }
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
    }
    return counts;
}

struct PrecisionCounts {
    std::size_t matches = 0;
    std::size_t total = 0;
};

PrecisionCounts modified_precision(const std::vector<std::string>& hyp,
                                   const std::vector<std::string>& ref, std::size_t n) {
    PrecisionCounts pc;
    const NgramCounts hyp_counts = count_ngrams(hyp, n);
    const NgramCounts ref_counts = count_ngrams(ref, n);
    for (const auto& [gram, count] : hyp_counts) {
        pc.total += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) {
            pc.matches += std::min(count, it->second);
        }
    }
    return pc;
}

double combine(const PrecisionCounts counts[4], std::size_t hyp_len, std::size_t ref_len,
               double epsilon) {
    if (hyp_len == 0 || ref_len == 0) {
        return 0.0;
    }
    if (counts[0].matches == 0) {
        return 0.0; // no unigram overlap at all
    }
    double log_sum = 0.0;
    for (int n = 0; n < 4; ++n) {
        double p;
        if (counts[n].total == 0) {
            p = epsilon; // hypothesis shorter than n
        } else if (counts[n].matches == 0) {
            p = epsilon / static_cast<double>(counts[n].total);
        } else {
            p = static_cast<double>(counts[n].matches) / static_cast<double>(counts[n].total);
        }
        log_sum += std::log(p);
    }
    const double brevity =
        hyp_len >= ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return brevity * std::exp(log_sum / 4.0);
}

} // namespace

double bleu4(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference,
             const BleuOptions& options) {
    PrecisionCounts counts[4];
    for (std::size_t n = 1; n <= 4; ++n) {
        counts[n - 1] = modified_precision(hypothesis, reference, n);
    }
    return combine(counts, hypothesis.size(), reference.size(), options.epsilon);
}

double corpus_bleu4(const std::vector<std::vector<std::string>>& hypotheses,
                    const std::vector<std::vector<std::string>>& references,
                    const BleuOptions& options) {
    if (hypotheses.size() != references.size()) {
        throw UsageError("corpus_bleu4: " + std::to_string(hypotheses.size()) +
                         " hypotheses vs " + std::to_string(references.size()) + " references");
    }
    PrecisionCounts counts[4];
    std::size_t hyp_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        hyp_len += hypotheses[i].size();
        ref_len += references[i].size();
        for (std::size_t n = 1; n <= 4; ++n) {
            const PrecisionCounts pc = modified_precision(hypotheses[i], references[i], n);
            counts[n - 1].matches += pc.matches;
            counts[n - 1].total += pc.total;
        }
    }
    return combine(counts, hyp_len, ref_len, options.epsilon);
}

std::vector<std::string> bleu_tokenize(std::string_view text, bool lowercase) {
    std::vector<std::string> tokens;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) {
            tokens.push_back(current);
            current.clear();
        }
    };
    for (char raw : text) {
        unsigned char c = static_cast<unsigned char>(raw);
        if (lowercase) {
            c = static_cast<unsigned char>(std::tolower(c));
        }
        if (std::isspace(c)) {
            flush();
        } else if (std::isalnum(c) || c == '_' || c >= 0x80) {
            current.push_back(static_cast<char>(c));
        } else {
            flush();
            tokens.push_back(std::string(1, static_cast<char>(c)));
        }
    }
    flush();
    return tokens;
}

Prf1 prf1(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.size() != labels.size()) {
        throw UsageError("prf1: " + std::to_string(predictions.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
    }
    if (predictions.empty()) {
        throw UsageError("prf1: empty inputs");
    }
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const bool p = predictions[i] != 0;
        const bool l = labels[i] != 0;
        tp += (p && l) ? 1 : 0;
        fp += (p && !l) ? 1 : 0;
        fn += (!p && l) ? 1 : 0;
    }
    Prf1 out;
    if (tp + fp == 0) {
        out.degenerate_precision = true;
    } else {
        out.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    }
    if (tp + fn == 0) {
        out.degenerate_recall = true;
    } else {
        out.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    }
    if (out.precision + out.recall > 0.0) {
        out.f1 = 2.0 * out.precision * out.recall / (out.precision + out.recall);
    }
    return out;
}

std::vector<ThresholdPoint> threshold_sweep(const std::vector<double>& scores,
                                            const std::vector<int>& labels,
                                            const std::vector<double>& grid) {
    if (scores.size() != labels.size() || scores.empty()) {
        throw UsageError("threshold_sweep: scores and labels must be equal-length and non-empty");
    }
    std::vector<ThresholdPoint> out;
    out.reserve(grid.size());
    for (double t : grid) {
        std::vector<int> preds(scores.size());
        std::size_t positive = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            preds[i] = scores[i] >= t ? 1 : 0;
            positive += static_cast<std::size_t>(preds[i]);
        }
        const Prf1 m = prf1(preds, labels);
        out.push_back(ThresholdPoint{t, m.precision, m.recall, m.f1, positive});
    }
    return out;
}

std::vector<double> default_threshold_grid() {
    std::vector<double> grid;
    grid.reserve(101);
    for (int i = 0; i <= 100; ++i) {
        grid.push_back(static_cast<double>(i) / 100.0);
    }
    return grid;
}

} // namespace peftkit
