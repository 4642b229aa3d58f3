#include "peftkit/review.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "peftkit/error.hpp"

namespace peftkit {

InstructionExample to_instruction(const ReviewExample& example, LangLabelPlacement placement) {
    InstructionExample out;
    switch (example.task) {
    case ReviewTask::necessity:
        if (!example.label.has_value()) {
            throw ValidationError("necessity example is missing its label");
        }
        out.instruction =
            "Decide whether the following code change requires a review comment. "
            "Answer yes or no.";
        out.input = example.code;
        out.output = *example.label != 0 ? "yes" : "no";
        break;
    case ReviewTask::comment_gen:
        if (!example.comment.has_value() || example.comment->empty()) {
            throw ValidationError("comment-generation example is missing its comment");
        }
        out.instruction = "Write a review comment for the following code change.";
        out.input = example.code;
        out.output = *example.comment;
        break;
    case ReviewTask::refinement:
        if (!example.comment.has_value() || example.comment->empty()) {
            throw ValidationError("refinement example is missing its comment");
        }
        if (!example.target.has_value() || example.target->empty()) {
            throw ValidationError("refinement example is missing its target code");
        }
        out.instruction = "Revise the code according to the review comment.";
        out.input = example.code + "\n\nReview comment:\n" + *example.comment;
        out.output = *example.target;
        break;
    }
    if (placement != LangLabelPlacement::none) {
        if (!example.lang.has_value() || example.lang->empty()) {
            throw ValidationError("language label placement requested but the record has no lang");
        }
        if (placement == LangLabelPlacement::instruction) {
            out.instruction += " The code is written in " + *example.lang + ".";
        } else {
            out.input = "Language: " + *example.lang + "\n" + out.input;
        }
    }
    return out;
}

namespace {

std::vector<int> prompt_tokens(const InstructionExample& ex, const Tokenizer& tokenizer,
                               const PromptTemplate& tmpl) {
    const std::string text = tmpl.render_prompt_text(ex);
    std::vector<int> tokens;
    const std::vector<int> body = tokenizer.encode(text);
    tokens.reserve(body.size() + 1);
    tokens.push_back(Tokenizer::bos_id);
    tokens.insert(tokens.end(), body.begin(), body.end());
    return tokens;
}

} // namespace

NecessityScore necessity_score(const ModelWeights& weights, const AdapterSet& adapters,
                               const ReviewExample& example, const Tokenizer& tokenizer,
                               double threshold, const PromptTemplate& tmpl,
                               LangLabelPlacement placement) {
    const int yes = tokenizer.yes_token();
    const int no = tokenizer.no_token();
    if (yes < 0 || no < 0) {
        throw ConfigError("tokenizer does not map \"yes\" and \"no\" to single tokens");
    }
    ReviewExample probe = example;
    if (!probe.label.has_value()) {
        probe.label = 0; // only the prompt is used; the label text is never rendered
    }
    const InstructionExample inst = to_instruction(probe, placement);
    std::vector<int> tokens = prompt_tokens(inst, tokenizer, tmpl);
    if (tokens.size() > weights.config.max_seq_len) {
        tokens.erase(tokens.begin() + 1,
                     tokens.begin() + 1 +
                         static_cast<std::ptrdiff_t>(tokens.size() - weights.config.max_seq_len));
    }

    Tensor<float> logits = forward(weights, tokens, adapters);
    const std::size_t v = weights.config.vocab_size;
    const float* row = &logits.values()[(tokens.size() - 1) * v];
    // renormalized mass over the two label tokens
    const double a = static_cast<double>(row[yes]);
    const double b = static_cast<double>(row[no]);
    const double mx = std::max(a, b);
    const double pa = std::exp(a - mx);
    const double pb = std::exp(b - mx);

    NecessityScore score;
    score.p_positive = pa / (pa + pb);
    score.threshold = threshold;
    score.predicted = score.p_positive >= threshold;
    return score;
}

namespace {

std::string generate_text(const ModelWeights& weights, const AdapterSet& adapters,
                          const InstructionExample& inst, const Tokenizer& tokenizer,
                          const PromptTemplate& tmpl, std::size_t max_new) {
    std::vector<int> tokens = prompt_tokens(inst, tokenizer, tmpl);
    const std::size_t max_seq = weights.config.max_seq_len;
    if (tokens.size() + 1 > max_seq) {
        tokens.erase(tokens.begin() + 1,
                     tokens.begin() + 1 + static_cast<std::ptrdiff_t>(tokens.size() + 1 - max_seq));
    }
    const std::size_t room = max_seq - tokens.size();
    const std::size_t budget = std::min(max_new, room);
    if (budget == 0) {
        return "";
    }
    const std::vector<int> full = generate(weights, tokens, budget, adapters, DecodeMode::greedy,
                                           1.0, nullptr, Tokenizer::eos_id);
    return tokenizer.decode(std::span<const int>(full).subspan(tokens.size()));
}

} // namespace

EvalReport evaluate(const ModelWeights& weights, const AdapterSet& adapters,
                    const std::vector<ReviewExample>& dataset, ReviewTask task,
                    const EvalOptions& options, const Tokenizer& tokenizer,
                    const PromptTemplate& tmpl) {
    if (dataset.empty()) {
        throw ConfigError("evaluate: dataset is empty");
    }
    for (const ReviewExample& ex : dataset) {
        if (ex.task != task) {
            throw ValidationError("evaluate: dataset record task does not match requested task");
        }
    }

    EvalReport report;
    report.task = task;
    report.n_examples = dataset.size();
    report.threshold = options.threshold;

    if (task == ReviewTask::necessity) {
        std::vector<double> scores;
        std::vector<int> labels;
        for (std::size_t i = 0; i < dataset.size(); ++i) {
            const NecessityScore s = necessity_score(weights, adapters, dataset[i], tokenizer,
                                                     options.threshold, tmpl, options.lang_label);
            ExampleResult r;
            r.index = i;
            r.p_positive = s.p_positive;
            r.predicted = s.predicted ? 1 : 0;
            r.label = *dataset[i].label;
            report.examples.push_back(r);
            scores.push_back(s.p_positive);
            labels.push_back(r.label);
        }
        std::vector<int> preds;
        preds.reserve(scores.size());
        for (double s : scores) {
            preds.push_back(s >= options.threshold ? 1 : 0);
        }
        report.prf = prf1(preds, labels);
        report.threshold_curve = threshold_sweep(scores, labels, default_threshold_grid());
        return report;
    }

    const bool lowercase = task == ReviewTask::comment_gen && options.lowercase_comments;
    std::vector<std::vector<std::string>> hyp_tokens, ref_tokens;
    double bleu_sum = 0.0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const InstructionExample inst = to_instruction(dataset[i], options.lang_label);
        ExampleResult r;
        r.index = i;
        r.reference = inst.output;
        r.prediction = generate_text(weights, adapters, inst, tokenizer, tmpl,
                                     options.max_new_tokens);
        std::vector<std::string> hyp = bleu_tokenize(r.prediction, lowercase);
        std::vector<std::string> ref = bleu_tokenize(r.reference, lowercase);
        r.bleu = bleu4(hyp, ref);
        bleu_sum += r.bleu;
        hyp_tokens.push_back(std::move(hyp));
        ref_tokens.push_back(std::move(ref));
        report.examples.push_back(std::move(r));
    }
    report.bleu4 = options.corpus_level_bleu
                       ? corpus_bleu4(hyp_tokens, ref_tokens)
                       : bleu_sum / static_cast<double>(dataset.size());
    return report;
}

void write_report(const EvalReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write report file: " + path);
    }
    using nlohmann::json;
    const bool necessity = report.task == ReviewTask::necessity;
    for (const ExampleResult& r : report.examples) {
        json j;
        j["record"] = "example";
        j["index"] = r.index;
        if (necessity) {
            j["p_positive"] = r.p_positive;
            j["predicted"] = r.predicted;
            j["label"] = r.label;
        } else {
            j["prediction"] = r.prediction;
            j["reference"] = r.reference;
            j["bleu4"] = r.bleu;
        }
        out << j.dump() << "\n";
    }
    for (const ThresholdPoint& p : report.threshold_curve) {
        json j;
        j["record"] = "threshold";
        j["threshold"] = p.threshold;
        j["precision"] = p.precision;
        j["recall"] = p.recall;
        j["f1"] = p.f1;
        j["predicted_positive"] = p.predicted_positive;
        out << j.dump() << "\n";
    }
    json s;
    s["record"] = "summary";
    s["task"] = review_task_name(report.task);
    s["n_examples"] = report.n_examples;
    if (report.bleu4.has_value()) {
        s["bleu4"] = *report.bleu4;
    }
    if (report.prf.has_value()) {
        s["threshold"] = report.threshold;
        s["precision"] = report.prf->precision;
        s["recall"] = report.prf->recall;
        s["f1"] = report.prf->f1;
    }
    out << s.dump() << "\n";
}

EvalReport read_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open report file: " + path);
    }
    using nlohmann::json;
    EvalReport report;
    bool saw_summary = false;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": invalid json: " + e.what());
        }
        const std::string record = j.value("record", "");
        if (record == "example") {
            ExampleResult r;
            r.index = j.value("index", std::size_t{0});
            if (j.contains("p_positive")) {
                r.p_positive = j["p_positive"].get<double>();
                r.predicted = j.value("predicted", 0);
                r.label = j.value("label", 0);
            } else {
                r.prediction = j.value("prediction", "");
                r.reference = j.value("reference", "");
                r.bleu = j.value("bleu4", 0.0);
            }
            report.examples.push_back(std::move(r));
        } else if (record == "threshold") {
            report.threshold_curve.push_back(ThresholdPoint{
                j.value("threshold", 0.0), j.value("precision", 0.0), j.value("recall", 0.0),
                j.value("f1", 0.0), j.value("predicted_positive", std::size_t{0})});
        } else if (record == "summary") {
            saw_summary = true;
            report.task = review_task_from_name(j.value("task", std::string{}));
            report.n_examples = j.value("n_examples", std::size_t{0});
            if (j.contains("bleu4")) {
                report.bleu4 = j["bleu4"].get<double>();
            }
            if (j.contains("precision")) {
                Prf1 m;
                m.precision = j["precision"].get<double>();
                m.recall = j.value("recall", 0.0);
                m.f1 = j.value("f1", 0.0);
                report.prf = m;
                report.threshold = j.value("threshold", 0.5);
            }
        } else {
            throw FormatError(path + ":" + std::to_string(lineno) + ": unknown record kind");
        }
    }
    if (!saw_summary) {
        throw FormatError(path + ": missing summary record");
    }
    return report;
}

} // namespace peftkit
