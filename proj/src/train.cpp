#include "peftkit/train.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

namespace peftkit {

TrainConfig TrainConfig::defaults_for(Method method, Stage stage, std::optional<ReviewTask> task) {
    TrainConfig c;
    c.stage = stage;
    c.batch_size = 64;
    c.max_tokens = 2048;
    if (method == Method::prefix) {
        c.learning_rate = 0.009;
        c.weight_decay = 0.02;
    } else {
        c.learning_rate = 0.0003;
        c.weight_decay = 0.01;
    }
    if (stage == Stage::task) {
        c.epochs = (task.has_value() && *task == ReviewTask::necessity) ? 5 : 10;
    } else {
        c.epochs = 3;
    }
    return c;
}

TrainConfig TrainConfig::desk_preset(Method method, Stage stage, std::optional<ReviewTask> task) {
    TrainConfig c = defaults_for(method, stage, task);
    c.batch_size = 8;
    return c;
}

namespace {

std::string unescape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '\\' && i + 1 < s.size()) {
            const char c = s[i + 1];
            if (c == 'n') {
                out.push_back('\n');
                ++i;
                continue;
            }
            if (c == 't') {
                out.push_back('\t');
                ++i;
                continue;
            }
            if (c == '\\') {
                out.push_back('\\');
                ++i;
                continue;
            }
        }
        out.push_back(s[i]);
    }
    return out;
}

std::string strip(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) {
        return "";
    }
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

} // namespace

void apply_config_file(const std::string& path, TrainConfig& config, PromptTemplate& tmpl) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file: " + path);
    }
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = strip(line);
        if (line.empty()) {
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        try {
            if (key == "epochs") {
                config.epochs = std::stoul(value);
            } else if (key == "batch_size") {
                config.batch_size = std::stoul(value);
            } else if (key == "max_tokens") {
                config.max_tokens = std::stoul(value);
            } else if (key == "learning_rate") {
                config.learning_rate = std::stod(value);
            } else if (key == "weight_decay") {
                config.weight_decay = std::stod(value);
            } else if (key == "seed") {
                config.seed = std::stoull(value);
            } else if (key == "max_steps") {
                config.max_steps = std::stoul(value);
            } else if (key == "template_with_input") {
                tmpl.with_input = unescape(value);
            } else if (key == "template_without_input") {
                tmpl.without_input = unescape(value);
            } else {
                throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown key \"" + key +
                                  "\"");
            }
        } catch (const std::invalid_argument&) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": bad value for \"" + key +
                              "\"");
        } catch (const std::out_of_range&) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": value out of range for \"" +
                              key + "\"");
        }
    }
    if (config.epochs == 0 || config.batch_size == 0 || config.max_tokens == 0) {
        throw ConfigError(path + ": epochs, batch_size and max_tokens must be positive");
    }
    if (config.learning_rate < 0.0 || config.weight_decay < 0.0) {
        throw ConfigError(path + ": learning_rate and weight_decay must be non-negative");
    }
}

std::vector<Tensor<float>> adapter_trainable_params(AdapterVariant& adapter) {
    return std::visit([](auto& a) { return trainable_params(a); }, adapter);
}

std::size_t adapter_trainable_count(const AdapterVariant& adapter) {
    return std::visit([](const auto& a) { return count_trainable(a); }, adapter);
}

AdapterSet adapter_set(const AdapterVariant& adapter) {
    AdapterSet set;
    if (const auto* lora = std::get_if<LoraAdapter>(&adapter)) {
        set.lora = lora;
    } else {
        set.prefix = &std::get<PrefixAdapter>(adapter);
    }
    return set;
}

Tensor<float> batch_loss(const ModelWeights& weights, const AdapterSet& adapters,
                         const Batch& batch) {
    Tensor<float> total;
    for (std::size_t r = 0; r < batch.batch_size; ++r) {
        const std::size_t len = batch.lengths[r];
        const std::span<const int> tokens(batch.row_tokens(r), len);
        const std::span<const int> labels(batch.row_labels(r), len);
        Tensor<float> logits = forward(weights, tokens, adapters);
        Tensor<float> loss = cross_entropy(logits, labels, Batch::ignore_index);
        total = total.defined() ? add(total, loss) : loss;
    }
    return scale(total, 1.0f / static_cast<float>(batch.batch_size));
}

TrainResult train_stage(const ModelWeights& weights, AdapterVariant& adapter,
                        const std::vector<InstructionExample>& dataset, const TrainConfig& config,
                        const Tokenizer& tokenizer, const PromptTemplate& tmpl,
                        const std::function<void(const StepRecord&)>& on_step) {
    if (dataset.empty()) {
        throw ConfigError("train_stage: dataset is empty");
    }
    if (config.epochs == 0 || config.batch_size == 0) {
        throw ConfigError("train_stage: epochs and batch_size must be positive");
    }

    AdamWOptions opt;
    opt.learning_rate = config.learning_rate;
    opt.weight_decay = config.weight_decay;
    AdamW<float> optimizer(adapter_trainable_params(adapter), opt);
    const AdapterSet set = adapter_set(adapter);

    TrainResult result;
    Rng rng(config.seed);
    std::size_t step = 0;
    bool done = false;
    for (std::size_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
        std::vector<std::size_t> order(dataset.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size() && !done;
             start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<InstructionExample> slice;
            slice.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                slice.push_back(dataset[order[i]]);
            }
            Batch batch = build_batch(slice, tokenizer, config.max_tokens, tmpl);
            Tensor<float> loss = batch_loss(weights, set, batch);
            const float loss_value = loss.item();
            if (!std::isfinite(loss_value)) {
                throw NumericError("training loss is not finite at step " + std::to_string(step));
            }
            backward(loss);
            optimizer.step();
            optimizer.zero_grad();

            StepRecord record{step, epoch, loss_value};
            result.history.push_back(record);
            if (on_step) {
                on_step(record);
            }
            ++step;
            if (config.max_steps.has_value() && step >= *config.max_steps) {
                done = true;
            }
        }
    }
    return result;
}

} // namespace peftkit
