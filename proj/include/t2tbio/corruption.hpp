#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "t2tbio/tokenizer.hpp"

namespace t2tbio {

struct SpanCorruptionConfig {
    double corruption_rate = 0.15;
    double mean_span_length = 3.0;
    std::size_t max_sentinels = 100;
    std::uint64_t seed = 0;

    void validate() const;
};

struct CorruptionExample {
    TokenSequence input_ids;
    TokenSequence target_ids;
};

// Number of tokens masked for a sequence of the given length: round(len * rate),
// at least one when rate > 0, never more than len.
std::size_t masked_token_count(std::size_t length, double rate);

// Samples a span mask: geometric span lengths (mean cfg.mean_span_length) clipped to
// the remaining budget, placed at uniformly drawn non-overlapping slots.
std::vector<bool> sample_span_mask(std::size_t length, const SpanCorruptionConfig& cfg);

// Builds the (input, target) pair for an explicit mask. Runs of masked tokens
// become one span each; the target ends with one extra sentinel and eos.
CorruptionExample corrupt_with_mask(std::span<const TokenId> tokens, const std::vector<bool>& mask,
                                    const Vocabulary& v, std::size_t max_sentinels);

CorruptionExample corrupt(std::span<const TokenId> tokens, const SpanCorruptionConfig& cfg, const Vocabulary& v);

// Splices target spans back into the input. Written as a scan over the target
// stream, independent of corrupt(); throws Error(data, "malformed pair ...").
TokenSequence reconstruct(const CorruptionExample& example, const Vocabulary& v);

// Shard file: one "INPUT<TAB>TARGET" line per record, ids space separated.
// A sidecar "<path>.manifest.json" records the config and record count.
void write_shard(const std::filesystem::path& path, std::span<const CorruptionExample> records,
                 const SpanCorruptionConfig& cfg);
std::vector<CorruptionExample> read_shard(const std::filesystem::path& path);
std::vector<CorruptionExample> parse_shard(std::string_view text);

}  // namespace t2tbio
