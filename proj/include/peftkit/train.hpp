#pragma once

#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "peftkit/adapter.hpp"
#include "peftkit/batch.hpp"
#include "peftkit/dataset.hpp"
#include "peftkit/forward.hpp"
#include "peftkit/model.hpp"
#include "peftkit/optim.hpp"

namespace peftkit {

enum class Stage { instruct, task };
enum class Method { lora, prefix };

struct TrainConfig {
    Stage stage = Stage::instruct;
    std::size_t epochs = 3;
    std::size_t batch_size = 64;
    std::size_t max_tokens = 2048;
    double learning_rate = 3e-4;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    std::optional<std::size_t> max_steps; // stop early regardless of epochs

    // Published defaults: batch 64, token limit 2048; prefix tuning at
    // lr 0.009 / wd 0.02, low-rank adaptation at lr 0.0003 / wd 0.01;
    // 5 task epochs for necessity prediction, 10 for the generation tasks.
    static TrainConfig defaults_for(Method method, Stage stage,
                                    std::optional<ReviewTask> task = {});

    // Same defaults with the batch size shrunk to 8 for laptop-sized runs.
    static TrainConfig desk_preset(Method method, Stage stage,
                                   std::optional<ReviewTask> task = {});
};

// Flat key = value file; '#' starts a comment, unknown keys are rejected.
// Recognized keys: epochs, batch_size, max_tokens, learning_rate,
// weight_decay, seed, max_steps, template_with_input, template_without_input
// (the template values understand \n escapes).
void apply_config_file(const std::string& path, TrainConfig& config, PromptTemplate& tmpl);

struct StepRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    float loss = 0.0f;
};

struct TrainResult {
    std::vector<StepRecord> history;
};

using AdapterVariant = std::variant<LoraAdapter, PrefixAdapter>;

std::vector<Tensor<float>> adapter_trainable_params(AdapterVariant& adapter);
std::size_t adapter_trainable_count(const AdapterVariant& adapter);
AdapterSet adapter_set(const AdapterVariant& adapter);

// Runs one tuning stage. Only adapter tensors are updated; the base stays
// frozen (it is never handed to the optimizer and carries no gradients).
// Deterministic for a fixed seed. Throws NumericError naming the step when
// the loss becomes non-finite.
TrainResult train_stage(const ModelWeights& weights, AdapterVariant& adapter,
                        const std::vector<InstructionExample>& dataset, const TrainConfig& config,
                        const Tokenizer& tokenizer,
                        const PromptTemplate& tmpl = PromptTemplate::standard(),
                        const std::function<void(const StepRecord&)>& on_step = {});

// Mean of the per-example losses of a batch (each example's loss is the mean
// over its supervised positions). Exposed for tests and evaluation.
Tensor<float> batch_loss(const ModelWeights& weights, const AdapterSet& adapters, const Batch& batch);

} // namespace peftkit
