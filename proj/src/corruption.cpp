#include "t2tbio/corruption.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "t2tbio/error.hpp"
#include "t2tbio/rng.hpp"

namespace t2tbio {

void SpanCorruptionConfig::validate() const {
    if (!(corruption_rate >= 0.0 && corruption_rate < 1.0)) {
        fail(ErrorKind::config, "corruption_rate must be in [0, 1)");
    }
    if (!(mean_span_length >= 1.0) || !std::isfinite(mean_span_length)) {
        fail(ErrorKind::config, "mean_span_length must be >= 1");
    }
    if (max_sentinels == 0) fail(ErrorKind::config, "max_sentinels must be positive");
}

std::size_t masked_token_count(std::size_t length, double rate) {
    if (rate <= 0.0 || length == 0) return 0;
    auto n = static_cast<std::size_t>(std::llround(static_cast<double>(length) * rate));
    if (n == 0) n = 1;
    return std::min(n, length);
}

std::vector<bool> sample_span_mask(std::size_t length, const SpanCorruptionConfig& cfg) {
    cfg.validate();
    std::vector<bool> mask(length, false);
    const std::size_t budget = masked_token_count(length, cfg.corruption_rate);
    if (budget == 0) return mask;

    Rng rng(cfg.seed);
    std::vector<std::size_t> spans;
    for (std::size_t remaining = budget; remaining > 0;) {
        const std::size_t len = std::min<std::uint64_t>(rng.geometric(cfg.mean_span_length), remaining);
        spans.push_back(len);
        remaining -= len;
    }

    // Slots: one per span and one per kept token, shuffled with Fisher-Yates.
    const std::size_t kept = length - budget;
    std::vector<bool> slot_is_span(spans.size() + kept, false);
    std::fill(slot_is_span.begin(), slot_is_span.begin() + static_cast<std::ptrdiff_t>(spans.size()), true);
    for (std::size_t i = slot_is_span.size(); i-- > 1;) {
        const auto j = static_cast<std::size_t>(rng.below(i + 1));
        const bool tmp = slot_is_span[i];
        slot_is_span[i] = slot_is_span[j];
        slot_is_span[j] = tmp;
    }

    std::size_t pos = 0;
    std::size_t next_span = 0;
    for (bool is_span : slot_is_span) {
        if (is_span) {
            for (std::size_t k = 0; k < spans[next_span]; ++k) mask[pos++] = true;
            ++next_span;
        } else {
            ++pos;
        }
    }
    return mask;
}

CorruptionExample corrupt_with_mask(std::span<const TokenId> tokens, const std::vector<bool>& mask,
                                    const Vocabulary& v, std::size_t max_sentinels) {
    if (tokens.empty()) fail(ErrorKind::data, "empty token sequence");
    if (mask.size() != tokens.size()) fail(ErrorKind::data, "mask length does not match tokens");
    for (TokenId t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= v.size()) fail(ErrorKind::data, "id out of range");
        if (v.is_reserved(t) && t != Vocabulary::unk_id) fail(ErrorKind::data, "reserved token in input");
    }

    std::size_t span_count = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] && (i == 0 || !mask[i - 1])) ++span_count;
    }
    // span_count sentinels plus the final one.
    if (span_count + 1 > std::min(max_sentinels, v.num_sentinels())) {
        fail(ErrorKind::data, "too many spans: " + std::to_string(span_count) + " spans need " +
                                  std::to_string(span_count + 1) + " sentinels");
    }

    CorruptionExample ex;
    std::size_t k = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!mask[i]) {
            ex.input_ids.push_back(tokens[i]);
            continue;
        }
        if (i == 0 || !mask[i - 1]) {
            const TokenId s = v.sentinel_id(k++);
            ex.input_ids.push_back(s);
            ex.target_ids.push_back(s);
        }
        ex.target_ids.push_back(tokens[i]);
    }
    ex.target_ids.push_back(v.sentinel_id(k));
    ex.target_ids.push_back(Vocabulary::eos_id);
    return ex;
}

CorruptionExample corrupt(std::span<const TokenId> tokens, const SpanCorruptionConfig& cfg, const Vocabulary& v) {
    cfg.validate();
    if (tokens.empty()) fail(ErrorKind::data, "empty token sequence");
    return corrupt_with_mask(tokens, sample_span_mask(tokens.size(), cfg), v, cfg.max_sentinels);
}

TokenSequence reconstruct(const CorruptionExample& example, const Vocabulary& v) {
    auto malformed = [](const std::string& why) { fail(ErrorKind::data, "malformed pair: " + why); };

    // Pass 1: cut the target into sentinel-keyed spans.
    const auto& target = example.target_ids;
    if (target.size() < 2 || target.back() != Vocabulary::eos_id) malformed("target must end with eos");
    std::map<std::size_t, TokenSequence> spans;
    std::size_t expected = 0;
    std::size_t i = 0;
    for (; i + 1 < target.size(); ++i) {
        const TokenId t = target[i];
        if (!v.is_sentinel(t)) {
            if (i == 0) malformed("target must start with a sentinel");
            if (t == Vocabulary::eos_id || t == Vocabulary::pad_id) malformed("special token inside span");
            spans[expected - 1].push_back(t);
            continue;
        }
        if (v.sentinel_index(t) != expected) malformed("sentinel order in target");
        ++expected;
    }
    if (expected == 0) malformed("target has no final sentinel");
    const std::size_t span_count = expected - 1;
    if (!spans.empty() && spans.rbegin()->first == span_count) malformed("tokens after final sentinel");

    // Pass 2: walk the input, replacing each sentinel by its span.
    TokenSequence out;
    std::size_t seen = 0;
    for (TokenId t : example.input_ids) {
        if (!v.is_sentinel(t)) {
            out.push_back(t);
            continue;
        }
        if (v.sentinel_index(t) != seen) malformed("sentinel order in input");
        auto it = spans.find(seen);
        if (it == spans.end()) malformed("empty span for sentinel " + std::to_string(seen));
        out.insert(out.end(), it->second.begin(), it->second.end());
        ++seen;
    }
    if (seen != span_count) malformed("input and target sentinel counts differ");
    return out;
}

namespace {

std::string join_ids(std::span<const TokenId> ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(ids[i]);
    }
    return out;
}

TokenSequence parse_ids(std::string_view field, std::size_t line_no) {
    TokenSequence ids;
    std::size_t i = 0;
    while (i < field.size()) {
        if (field[i] == ' ') {
            ++i;
            continue;
        }
        TokenId value = 0;
        auto [ptr, ec] = std::from_chars(field.data() + i, field.data() + field.size(), value);
        if (ec != std::errc{} || value < 0 || (ptr != field.data() + field.size() && *ptr != ' ')) {
            fail(ErrorKind::data, "shard line " + std::to_string(line_no) + ": bad token id");
        }
        ids.push_back(value);
        i = static_cast<std::size_t>(ptr - field.data());
    }
    return ids;
}

}  // namespace

void write_shard(const std::filesystem::path& path, std::span<const CorruptionExample> records,
                 const SpanCorruptionConfig& cfg) {
    {
        std::ofstream f(path, std::ios::binary);
        if (!f) fail(ErrorKind::data, "cannot write shard: " + path.string());
        for (const auto& r : records) f << join_ids(r.input_ids) << '\t' << join_ids(r.target_ids) << '\n';
    }
    nlohmann::ordered_json manifest;
    manifest["format"] = "t2tbio-shard v1";
    manifest["records"] = records.size();
    manifest["config"] = {{"corruption_rate", cfg.corruption_rate},
                          {"mean_span_length", cfg.mean_span_length},
                          {"max_sentinels", cfg.max_sentinels},
                          {"seed", cfg.seed}};
    std::ofstream m(path.string() + ".manifest.json", std::ios::binary);
    if (!m) fail(ErrorKind::data, "cannot write shard manifest");
    m << manifest.dump(2) << '\n';
}

std::vector<CorruptionExample> parse_shard(std::string_view text) {
    std::vector<CorruptionExample> out;
    std::size_t start = 0;
    std::size_t line_no = 0;
    while (start < text.size()) {
        auto nl = text.find('\n', start);
        if (nl == std::string_view::npos) nl = text.size();
        const auto line = text.substr(start, nl - start);
        start = nl + 1;
        ++line_no;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string_view::npos || line.find('\t', tab + 1) != std::string_view::npos) {
            fail(ErrorKind::data, "shard line " + std::to_string(line_no) + ": expected INPUT<TAB>TARGET");
        }
        out.push_back({parse_ids(line.substr(0, tab), line_no), parse_ids(line.substr(tab + 1), line_no)});
    }
    return out;
}

std::vector<CorruptionExample> read_shard(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::data, "cannot open shard: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_shard(ss.str());
}

}  // namespace t2tbio
