#include "t2tbio/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <set>

#include "t2tbio/error.hpp"

namespace t2tbio {

void TrainConfig::validate(const ModelConfig& model) const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        fail(ErrorKind::config, "train.learning_rate must be finite and >= 0");
    }
    if (batch_size == 0) fail(ErrorKind::config, "train.batch_size must be positive");
    if (input_len == 0 || target_len == 0) fail(ErrorKind::config, "train.input_len/target_len must be positive");
    if (input_len > model.max_seq_len) fail(ErrorKind::config, "train.input_len exceeds model.max_seq_len");
    if (target_len > model.max_seq_len) fail(ErrorKind::config, "train.target_len exceeds model.max_seq_len");
    if (log_every == 0) fail(ErrorKind::config, "train.log_every must be positive");
}

template <typename T>
void optimizer_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, double lr,
                    const AdamHyper& hyper) {
    if (grads.size() != params.size()) fail(ErrorKind::config, "gradient shape does not match parameters");
    if (state.m.empty()) {
        state.m.assign(params.size(), T(0));
        state.v.assign(params.size(), T(0));
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        fail(ErrorKind::config, "optimizer state shape does not match parameters");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const T b1 = static_cast<T>(hyper.beta1);
    const T b2 = static_cast<T>(hyper.beta2);
    const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(hyper.beta1, t)));
    const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(hyper.beta2, t)));
    const T step = static_cast<T>(lr);
    const T eps = static_cast<T>(hyper.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = grads[i];
        state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
        state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
        const T m_hat = state.m[i] * c1;
        const T v_hat = state.v[i] * c2;
        params[i] -= step * m_hat / (std::sqrt(v_hat) + eps);
    }
}

template void optimizer_step<float>(std::span<float>, std::span<const float>, AdamState<float>&, double,
                                    const AdamHyper&);
template void optimizer_step<double>(std::span<double>, std::span<const double>, AdamState<double>&, double,
                                     const AdamHyper&);

TrainState TrainState::fresh(ParamStore<float> params, std::uint64_t seed) {
    TrainState s{std::move(params), {}, Rng(seed), 0};
    s.opt.m.assign(s.params.size(), 0.0f);
    s.opt.v.assign(s.params.size(), 0.0f);
    return s;
}

MixtureSampler::MixtureSampler(std::vector<double> weights) : weights_(std::move(weights)) {
    if (weights_.empty()) fail(ErrorKind::config, "empty mixture");
    double total = 0.0;
    for (double w : weights_) {
        if (!std::isfinite(w) || w < 0.0) fail(ErrorKind::config, "mixture weights must be finite and non-negative");
        total += w;
    }
    if (!(total > 0.0)) fail(ErrorKind::config, "mixture weights must have a positive sum");
    counts_.assign(weights_.size(), 0);
}

std::size_t MixtureSampler::draw(Rng& rng) {
    const std::size_t i = rng.categorical(weights_);
    ++counts_[i];
    return i;
}

std::vector<double> MixtureSampler::normalized() const {
    double total = 0.0;
    for (double w : weights_) total += w;
    std::vector<double> out;
    for (double w : weights_) out.push_back(w / total);
    return out;
}

std::vector<TokenSequence> make_windows(const TokenSequence& doc, std::size_t window, std::size_t min_remainder) {
    std::vector<TokenSequence> out;
    for (std::size_t start = 0; start < doc.size(); start += window) {
        const std::size_t len = std::min(window, doc.size() - start);
        if (len < window && start > 0 && len < min_remainder) break;
        out.emplace_back(doc.begin() + static_cast<std::ptrdiff_t>(start),
                         doc.begin() + static_cast<std::ptrdiff_t>(start + len));
    }
    return out;
}

std::vector<SequencePair> pretraining_pairs(const CorpusSource& corpus, std::size_t corpus_index,
                                            const SpanCorruptionConfig& corruption, const TrainConfig& train,
                                            const Vocabulary& vocab, std::size_t* dropped) {
    std::vector<SequencePair> out;
    std::size_t window_index = 0;
    for (const auto& doc : corpus.documents) {
        for (auto& w : make_windows(doc, train.input_len)) {
            // Mask seed is a pure function of (corruption seed, corpus, window).
            std::uint64_t mix = corruption.seed ^ (0x9E3779B97F4A7C15ULL * (corpus_index + 1));
            mix ^= splitmix64(mix) + window_index++;
            SpanCorruptionConfig cfg = corruption;
            cfg.seed = splitmix64(mix);
            auto ex = corrupt(w, cfg, vocab);
            if (ex.target_ids.size() > train.target_len || ex.input_ids.size() > train.input_len) {
                if (dropped) ++*dropped;
                continue;
            }
            out.push_back({std::move(ex.input_ids), std::move(ex.target_ids)});
        }
    }
    return out;
}

namespace {

void log_step(const TrainHooks& hooks, const TrainConfig& train, const LossPoint& p) {
    if (!hooks.log || (p.step % train.log_every != 0 && p.step != train.num_steps)) return;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", p.loss);
    *hooks.log << "step=" << p.step << " task=" << p.task << " loss=" << buf << '\n';
}

double train_step(TrainState& state, const ModelConfig& model, const TrainConfig& train,
                  const std::vector<SequencePair>& pool) {
    std::vector<SequencePair> rows;
    rows.reserve(train.batch_size);
    for (std::size_t b = 0; b < train.batch_size; ++b) {
        rows.push_back(pool[static_cast<std::size_t>(state.rng.below(pool.size()))]);
    }
    const Batch batch = make_batch(rows);
    auto lg = loss_and_grads(state.params, model, batch, model.dropout_rate > 0.0 ? &state.rng : nullptr);
    optimizer_step<float>(state.params.values(), lg.grads.values(), state.opt, train.learning_rate);
    ++state.step;
    return lg.loss;
}

void maybe_checkpoint(const TrainState& state, const TrainConfig& train, const TrainHooks& hooks) {
    if (!hooks.on_checkpoint) return;
    const bool periodic = train.checkpoint_every > 0 && state.step % train.checkpoint_every == 0;
    if (periodic || state.step == train.num_steps) hooks.on_checkpoint(state);
}

}  // namespace

PretrainResult pretrain(TrainState& state, const ModelConfig& model, const std::vector<CorpusSource>& corpora,
                        const SpanCorruptionConfig& corruption, const TrainConfig& train, const Vocabulary& vocab,
                        const TrainHooks& hooks) {
    model.validate();
    train.validate(model);
    corruption.validate();
    if (model.vocab_size != vocab.size()) fail(ErrorKind::config, "model.vocab_size does not match vocabulary");
    if (corpora.empty()) fail(ErrorKind::config, "no pretraining corpora");

    std::vector<double> weights;
    std::set<std::string> names;
    PretrainResult result;
    std::vector<std::vector<SequencePair>> pools;
    for (std::size_t c = 0; c < corpora.size(); ++c) {
        if (!names.insert(corpora[c].name).second) fail(ErrorKind::config, "duplicate corpus name: " + corpora[c].name);
        weights.push_back(corpora[c].weight);
        pools.push_back(pretraining_pairs(corpora[c], c, corruption, train, vocab, &result.dropped_windows));
        result.windows += pools.back().size();
        if (pools.back().empty() && corpora[c].weight > 0.0) {
            fail(ErrorKind::data, "corpus has no usable windows: " + corpora[c].name);
        }
    }
    MixtureSampler sampler(weights);

    while (state.step < train.num_steps) {
        const std::size_t c = sampler.draw(state.rng);
        const double l = train_step(state, model, train, pools[c]);
        result.curve.push_back({state.step, corpora[c].name, l});
        log_step(hooks, train, result.curve.back());
        maybe_checkpoint(state, train, hooks);
    }
    result.corpus_draws = sampler.counts();
    return result;
}

bool encode_example(const TaskExample& ex, const Vocabulary& vocab, const TrainConfig& train, SequencePair& out,
                    bool* truncated) {
    out.input = encode(vocab, ex.input_text);
    if (truncated) *truncated = false;
    if (out.input.size() > train.input_len) {
        out.input.resize(train.input_len);
        if (truncated) *truncated = true;
    }
    out.target = encode(vocab, ex.target_text);
    out.target.push_back(Vocabulary::eos_id);
    return out.target.size() <= train.target_len;
}

FinetuneResult finetune(TrainState& state, const ModelConfig& model, const std::vector<TaskDataset>& mixture,
                        const TrainConfig& train, const Vocabulary& vocab, const TrainHooks& hooks) {
    model.validate();
    train.validate(model);
    if (mixture.empty()) fail(ErrorKind::config, "empty mixture");
    if (model.vocab_size != vocab.size()) fail(ErrorKind::config, "model.vocab_size does not match vocabulary");

    FinetuneResult result;
    std::vector<double> weights;
    std::set<std::string> names;
    std::vector<std::vector<SequencePair>> pools;
    for (const auto& task : mixture) {
        if (!names.insert(task.name).second) fail(ErrorKind::config, "duplicate task name: " + task.name);
        weights.push_back(task.weight);
        auto& pool = pools.emplace_back();
        for (const auto& ex : task.examples) {
            SequencePair pair;
            bool truncated = false;
            if (!encode_example(ex, vocab, train, pair, &truncated)) {
                ++result.dropped_examples;
                continue;
            }
            if (truncated) ++result.truncated_inputs;
            pool.push_back(std::move(pair));
        }
        if (pool.empty() && task.weight > 0.0) fail(ErrorKind::data, "task has no usable examples: " + task.name);
    }
    if (hooks.log && result.truncated_inputs > 0) {
        *hooks.log << "warning: truncated " << result.truncated_inputs << " inputs to " << train.input_len
                   << " tokens\n";
    }
    if (hooks.log && result.dropped_examples > 0) {
        *hooks.log << "warning: dropped " << result.dropped_examples << " examples with targets over "
                   << train.target_len << " tokens\n";
    }
    MixtureSampler sampler(weights);

    while (state.step < train.num_steps) {
        const std::size_t t = sampler.draw(state.rng);
        const double l = train_step(state, model, train, pools[t]);
        LossPoint p{state.step, mixture[t].name, l};
        result.curve.push_back(p);
        result.per_task[p.task].push_back(p);
        log_step(hooks, train, p);
        maybe_checkpoint(state, train, hooks);
    }
    result.task_draws = sampler.counts();
    return result;
}

std::string generate(const ParamStore<float>& params, const ModelConfig& model, const Vocabulary& vocab,
                     std::string_view input_text, std::size_t input_len, std::size_t max_len) {
    TokenSequence ids = encode(vocab, input_text);
    if (ids.size() > input_len) ids.resize(input_len);
    const auto out = greedy_decode(params, model, ids, max_len);
    return decode(vocab, out);
}

}  // namespace t2tbio
