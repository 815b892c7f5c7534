#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "t2tbio/corruption.hpp"
#include "t2tbio/model.hpp"
#include "t2tbio/rng.hpp"
#include "t2tbio/task_codec.hpp"
#include "t2tbio/tokenizer.hpp"

namespace t2tbio {

struct TrainConfig {
    double learning_rate = 0.001;
    std::size_t batch_size = 8;
    std::size_t num_steps = 100;
    std::size_t input_len = 512;
    std::size_t target_len = 512;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0;  // 0 = only at the end
    std::size_t log_every = 1;

    void validate(const ModelConfig& model) const;
};

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::vector<T> m;
    std::vector<T> v;
    std::uint64_t step = 0;
};

// Bias-corrected Adam with a constant learning rate.
template <typename T>
void optimizer_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, double lr,
                    const AdamHyper& hyper = {});

// Everything needed to continue a run bit-for-bit.
struct TrainState {
    ParamStore<float> params;
    AdamState<float> opt;
    Rng rng;
    std::size_t step = 0;

    static TrainState fresh(ParamStore<float> params, std::uint64_t seed);
};

// Categorical sampler over non-negative weights; counts every draw.
class MixtureSampler {
public:
    explicit MixtureSampler(std::vector<double> weights);
    std::size_t draw(Rng& rng);
    const std::vector<std::size_t>& counts() const { return counts_; }
    std::vector<double> normalized() const;

private:
    std::vector<double> weights_;
    std::vector<std::size_t> counts_;
};

struct CorpusSource {
    std::string name;
    std::vector<TokenSequence> documents;
    double weight = 1.0;
};

struct TaskDataset {
    std::string name;
    std::vector<TaskExample> examples;
    double weight = 1.0;
};

struct LossPoint {
    std::size_t step = 0;
    std::string task;
    double loss = 0.0;
};

struct TrainHooks {
    std::ostream* log = nullptr;  // "step=<n> task=<name> loss=<float>" lines
    std::function<void(const TrainState&)> on_checkpoint;
};

struct PretrainResult {
    std::vector<LossPoint> curve;
    std::vector<std::size_t> corpus_draws;
    std::size_t windows = 0;
    std::size_t dropped_windows = 0;
};

// Contiguous non-overlapping windows of `window` tokens. A trailing remainder
// shorter than `min_remainder` is dropped unless it is the whole document.
std::vector<TokenSequence> make_windows(const TokenSequence& doc, std::size_t window, std::size_t min_remainder = 16);

// Corrupted pairs for every window of every document, one fixed mask per window.
std::vector<SequencePair> pretraining_pairs(const CorpusSource& corpus, std::size_t corpus_index,
                                            const SpanCorruptionConfig& corruption, const TrainConfig& train,
                                            const Vocabulary& vocab, std::size_t* dropped = nullptr);

// Each step samples one corpus by weight and trains on batch_size of its windows.
PretrainResult pretrain(TrainState& state, const ModelConfig& model, const std::vector<CorpusSource>& corpora,
                        const SpanCorruptionConfig& corruption, const TrainConfig& train, const Vocabulary& vocab,
                        const TrainHooks& hooks = {});

struct FinetuneResult {
    std::vector<LossPoint> curve;
    std::map<std::string, std::vector<LossPoint>> per_task;
    std::vector<std::size_t> task_draws;
    std::size_t truncated_inputs = 0;
    std::size_t dropped_examples = 0;
};

// Tokenises one example: input truncated to input_len, target + eos kept whole
// (returns false when the target does not fit).
bool encode_example(const TaskExample& ex, const Vocabulary& vocab, const TrainConfig& train, SequencePair& out,
                    bool* truncated = nullptr);

// Each step samples one task by weight and trains on batch_size of its examples.
FinetuneResult finetune(TrainState& state, const ModelConfig& model, const std::vector<TaskDataset>& mixture,
                        const TrainConfig& train, const Vocabulary& vocab, const TrainHooks& hooks = {});

// Greedy generation for one input string.
std::string generate(const ParamStore<float>& params, const ModelConfig& model, const Vocabulary& vocab,
                     std::string_view input_text, std::size_t input_len, std::size_t max_len);

}  // namespace t2tbio
