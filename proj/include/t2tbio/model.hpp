#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "t2tbio/rng.hpp"
#include "t2tbio/tokenizer.hpp"

namespace t2tbio {

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 32;
    std::size_t n_heads = 4;
    std::size_t d_ff = 64;
    std::size_t n_encoder_layers = 2;
    std::size_t n_decoder_layers = 2;
    std::size_t rel_pos_buckets = 32;
    std::size_t rel_pos_max_distance = 128;
    std::size_t max_seq_len = 128;
    double dropout_rate = 0.0;

    void validate() const;
    std::size_t d_head() const { return d_model / n_heads; }
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorInfo {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

// Tensor order and shapes are a pure function of the config.
std::vector<TensorInfo> param_layout(const ModelConfig& cfg);

// Closed form: V*D + 2*B*H + Le*(2D + 4D^2 + 2DF) + Ld*(3D + 8D^2 + 2DF) + 2D.
std::size_t parameter_count(const ModelConfig& cfg);

// Named real-valued tensors stored in one contiguous buffer. Gradients and Adam
// moments use the same type so they share the layout.
template <typename T>
class ParamStore {
public:
    ParamStore() = default;
    explicit ParamStore(const ModelConfig& cfg);

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::size_t size() const { return data_.size(); }
    const std::vector<TensorInfo>& layout() const { return layout_; }

    std::span<T> tensor(std::string_view name);
    std::span<const T> tensor(std::string_view name) const;
    const TensorInfo& info(std::string_view name) const;

    bool all_finite() const;
    void fill(T value);

    friend bool operator==(const ParamStore& a, const ParamStore& b) {
        return a.data_ == b.data_ && a.layout_.size() == b.layout_.size();
    }

private:
    std::vector<TensorInfo> layout_;
    std::vector<T> data_;
};

// Embedding ~ N(0, 1); projections ~ N(0, 1/fan_in); norm scales 1; position
// biases ~ N(0, 0.1^2). Draws come from Rng(seed) in layout order.
template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

struct SequencePair {
    TokenSequence input;
    TokenSequence target;  // includes the trailing eos
};

// Padded, row-major [rows, len] id matrices. The decoder input is the target
// shifted right with pad (id 0) as the start token.
struct Batch {
    std::size_t rows = 0;
    std::size_t enc_len = 0;
    std::size_t dec_len = 0;
    std::vector<TokenId> encoder_input_ids;
    std::vector<TokenId> decoder_input_ids;
    std::vector<TokenId> target_ids;
    std::vector<std::uint8_t> encoder_mask;  // 1 = real token
    std::vector<std::uint8_t> target_mask;   // 1 = contributes to the loss

    std::size_t loss_tokens() const;
};

Batch make_batch(std::span<const SequencePair> pairs);

// Bucket for (key position - query position). Small distances get exact buckets,
// larger ones share logarithmically sized buckets up to max_distance, then clamp.
// The bidirectional variant reserves the upper half of the buckets for keys
// after the query.
int relative_position_bucket(long relative_distance, std::size_t n_buckets, std::size_t max_distance,
                             bool bidirectional);

// Logits [rows, dec_len, vocab] with no dropout.
template <typename T>
std::vector<T> forward(const ParamStore<T>& params, const ModelConfig& cfg, const Batch& batch);

template <typename T>
struct LossAndGrads {
    double loss = 0.0;
    std::size_t tokens = 0;
    ParamStore<T> grads;
};

// Mean token cross-entropy over non-pad targets and its exact gradient. When
// cfg.dropout_rate > 0 and dropout_rng is given, sublayer outputs are dropped.
template <typename T>
LossAndGrads<T> loss_and_grads(const ParamStore<T>& params, const ModelConfig& cfg, const Batch& batch,
                               Rng* dropout_rng = nullptr);

// Loss only (same value as loss_and_grads().loss, cheaper).
template <typename T>
double loss(const ParamStore<T>& params, const ModelConfig& cfg, const Batch& batch);

// Argmax decoding from the pad start token; ties go to the lowest id. The eos
// token, when produced, is the last element.
template <typename T>
TokenSequence greedy_decode(const ParamStore<T>& params, const ModelConfig& cfg, std::span<const TokenId> encoder_ids,
                            std::size_t max_len);

}  // namespace t2tbio
