#include "peftkit/dataset.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "peftkit/error.hpp"

namespace peftkit {

namespace {

using nlohmann::json;

json parse_line(const std::string& line, const std::string& path, std::size_t lineno) {
    try {
        json j = json::parse(line);
        if (!j.is_object()) {
            throw DataError(path + ":" + std::to_string(lineno) + ": record is not an object");
        }
        return j;
    } catch (const json::exception& e) {
        throw DataError(path + ":" + std::to_string(lineno) + ": invalid json: " + e.what());
    }
}

std::string require_string(const json& j, const char* field, const std::string& path,
                           std::size_t lineno) {
    if (!j.contains(field) || !j[field].is_string()) {
        throw DataError(path + ":" + std::to_string(lineno) + ": missing string field \"" +
                        field + "\"");
    }
    return j[field].get<std::string>();
}

template <class Fn>
void for_each_line(const std::string& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open dataset file: " + path);
    }
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        fn(line, lineno);
    }
}

} // namespace

std::vector<InstructionExample> load_instruction_file(const std::string& path) {
    std::vector<InstructionExample> out;
    for_each_line(path, [&](const std::string& line, std::size_t lineno) {
        const json j = parse_line(line, path, lineno);
        InstructionExample ex;
        ex.instruction = require_string(j, "instruction", path, lineno);
        ex.output = require_string(j, "output", path, lineno);
        if (j.contains("input") && !j["input"].is_null()) {
            if (!j["input"].is_string()) {
                throw DataError(path + ":" + std::to_string(lineno) + ": \"input\" must be a string");
            }
            ex.input = j["input"].get<std::string>();
        }
        if (ex.instruction.empty() || ex.output.empty()) {
            throw DataError(path + ":" + std::to_string(lineno) +
                            ": instruction and output must be non-empty");
        }
        out.push_back(std::move(ex));
    });
    return out;
}

std::vector<InstructionExample> load_instruction_dataset(const std::string& pl_path,
                                                         const std::string& nl_path,
                                                         InstructionMix mix) {
    std::vector<InstructionExample> out = load_instruction_file(pl_path);
    if (mix == InstructionMix::pl_nl) {
        if (nl_path.empty()) {
            throw ConfigError("pl-nl mix requires a natural-language instruction file");
        }
        std::vector<InstructionExample> nl = load_instruction_file(nl_path);
        out.insert(out.end(), std::make_move_iterator(nl.begin()),
                   std::make_move_iterator(nl.end()));
    }
    return out;
}

const char* review_task_name(ReviewTask t) {
    switch (t) {
    case ReviewTask::necessity: return "rnp";
    case ReviewTask::comment_gen: return "rcg";
    case ReviewTask::refinement: return "cr";
    }
    return "?";
}

ReviewTask review_task_from_name(const std::string& name) {
    if (name == "rnp") {
        return ReviewTask::necessity;
    }
    if (name == "rcg") {
        return ReviewTask::comment_gen;
    }
    if (name == "cr") {
        return ReviewTask::refinement;
    }
    throw ValidationError("unknown task \"" + name + "\" (expected rnp, rcg or cr)");
}

std::vector<ReviewExample> load_task_dataset(const std::string& path, ReviewTask expected_task) {
    std::vector<ReviewExample> out;
    for_each_line(path, [&](const std::string& line, std::size_t lineno) {
        const json j = parse_line(line, path, lineno);
        const std::string where = path + ":" + std::to_string(lineno);
        ReviewExample ex;
        const std::string task = require_string(j, "task", path, lineno);
        try {
            ex.task = review_task_from_name(task);
        } catch (const ValidationError& e) {
            throw DataError(where + ": " + e.what());
        }
        if (ex.task != expected_task) {
            throw DataError(where + ": record task \"" + task + "\" does not match dataset task \"" +
                            review_task_name(expected_task) + "\"");
        }
        ex.code = require_string(j, "code", path, lineno);
        if (j.contains("comment") && !j["comment"].is_null()) {
            ex.comment = j["comment"].get<std::string>();
        }
        if (j.contains("label") && !j["label"].is_null()) {
            if (!j["label"].is_number_integer()) {
                throw DataError(where + ": \"label\" must be 0 or 1");
            }
            const int label = j["label"].get<int>();
            if (label != 0 && label != 1) {
                throw DataError(where + ": \"label\" must be 0 or 1");
            }
            ex.label = label;
        }
        if (j.contains("target") && !j["target"].is_null()) {
            ex.target = j["target"].get<std::string>();
        }
        if (j.contains("lang") && !j["lang"].is_null()) {
            ex.lang = j["lang"].get<std::string>();
        }
        switch (ex.task) {
        case ReviewTask::necessity:
            if (!ex.label.has_value()) {
                throw DataError(where + ": necessity record is missing \"label\"");
            }
            break;
        case ReviewTask::comment_gen:
            if (!ex.comment.has_value() || ex.comment->empty()) {
                throw DataError(where + ": comment-generation record is missing \"comment\"");
            }
            break;
        case ReviewTask::refinement:
            if (!ex.comment.has_value() || ex.comment->empty()) {
                throw DataError(where + ": refinement record is missing \"comment\"");
            }
            if (!ex.target.has_value() || ex.target->empty()) {
                throw DataError(where + ": refinement record is missing \"target\"");
            }
            break;
        }
        out.push_back(std::move(ex));
    });
    return out;
}

} // namespace peftkit
