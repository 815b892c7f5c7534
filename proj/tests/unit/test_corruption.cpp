#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "t2tbio/corruption.hpp"
#include "t2tbio/error.hpp"
#include "test_support.hpp"

using namespace t2tbio;

namespace {

SpanCorruptionConfig cfg_with(double rate, std::uint64_t seed) {
    SpanCorruptionConfig c;
    c.corruption_rate = rate;
    c.seed = seed;
    return c;
}

}  // namespace

TEST_CASE("masked token count") {
    CHECK(masked_token_count(20, 0.15) == 3);
    CHECK(masked_token_count(10, 0.15) == 2);  // 1.5 rounds half away from zero
    CHECK(masked_token_count(3, 0.1) == 1);    // at least one
    CHECK(masked_token_count(50, 0.0) == 0);
    CHECK(masked_token_count(1, 0.9) == 1);
}

TEST_CASE("mask budget is exact") {
    for (double rate : {0.1, 0.15, 0.3}) {
        for (std::size_t len = 10; len <= 512; len += 7) {
            const auto mask = sample_span_mask(len, cfg_with(rate, len * 31 + 7));
            REQUIRE(mask.size() == len);
            const auto masked = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
            CHECK(masked == static_cast<std::size_t>(std::llround(static_cast<double>(len) * rate)));
        }
    }
}

TEST_CASE("rate zero leaves the input alone") {
    const auto& v = test::corpus_vocab();
    Rng rng(1);
    const auto toks = test::random_tokens(rng, v, 40);
    const auto ex = corrupt(toks, cfg_with(0.0, 9), v);
    CHECK(ex.input_ids == toks);
    CHECK(ex.target_ids == TokenSequence{v.sentinel_id(0), Vocabulary::eos_id});
}

TEST_CASE("single span splice and malformed pairs") {
    const auto& v = test::corpus_vocab();
    const TokenId A = 10, B = 11, C = 12;
    const TokenId s0 = v.sentinel_id(0), s1 = v.sentinel_id(1), s2 = v.sentinel_id(2);
    CHECK(reconstruct({{A, s0, C}, {s0, B, s1, Vocabulary::eos_id}}, v) == TokenSequence{A, B, C});
    CHECK_THROWS_WITH_AS(reconstruct({{A, s0, C}, {s1, B, s2, Vocabulary::eos_id}}, v),
                         doctest::Contains("malformed pair"), Error);
    CHECK_THROWS_AS(reconstruct({{A, s0, C}, {s0, B, s1}}, v), Error);
    CHECK_THROWS_AS(reconstruct({{A, s0, s0, C}, {s0, B, s1, Vocabulary::eos_id}}, v), Error);
    CHECK_THROWS_AS(reconstruct({{A, C}, {s0, B, s1, Vocabulary::eos_id}}, v), Error);
}

TEST_CASE("structural invariants and round trip over random sequences") {
    const auto& v = test::corpus_vocab();
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t len = 5 + rng.below(200);
        const double rate = std::array{0.1, 0.15, 0.3}[rng.below(3)];
        const auto toks = test::random_tokens(rng, v, len);
        const auto cfg = cfg_with(rate, rng.next());
        const auto ex = corrupt(toks, cfg, v);
        REQUIRE(reconstruct(ex, v) == toks);

        std::vector<std::size_t> in_sent, tgt_sent;
        for (std::size_t i = 0; i < ex.input_ids.size(); ++i) {
            if (!v.is_sentinel(ex.input_ids[i])) continue;
            in_sent.push_back(v.sentinel_index(ex.input_ids[i]));
            if (i + 1 < ex.input_ids.size()) CHECK_FALSE(v.is_sentinel(ex.input_ids[i + 1]));
        }
        for (auto t : ex.target_ids)
            if (v.is_sentinel(t)) tgt_sent.push_back(v.sentinel_index(t));
        for (std::size_t k = 0; k < in_sent.size(); ++k) CHECK(in_sent[k] == k);
        REQUIRE(tgt_sent.size() == in_sent.size() + 1);
        for (std::size_t k = 0; k < tgt_sent.size(); ++k) CHECK(tgt_sent[k] == k);
        CHECK(ex.target_ids.back() == Vocabulary::eos_id);
        const std::size_t masked = ex.target_ids.size() - tgt_sent.size() - 1;
        CHECK(masked == masked_token_count(len, rate));
        CHECK(ex.input_ids.size() == len - masked + in_sent.size());
    }
}

TEST_CASE("determinism and seed sensitivity") {
    const auto& v = test::corpus_vocab();
    Rng rng(77);
    const auto toks = test::random_tokens(rng, v, 100);
    const auto a = corrupt(toks, cfg_with(0.15, 5), v);
    const auto b = corrupt(toks, cfg_with(0.15, 5), v);
    CHECK(a.input_ids == b.input_ids);
    CHECK(a.target_ids == b.target_ids);
    int differ = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto x = corrupt(toks, cfg_with(0.15, 1000 + 2 * s), v);
        const auto y = corrupt(toks, cfg_with(0.15, 1001 + 2 * s), v);
        differ += x.input_ids != y.input_ids ? 1 : 0;
    }
    CHECK(differ >= 99);
}

TEST_CASE("errors: reserved ids, empty input, too many spans") {
    const auto& v = test::corpus_vocab();
    CHECK_THROWS_WITH_AS(corrupt(TokenSequence{5, v.sentinel_id(3), 6}, cfg_with(0.15, 1), v),
                         "reserved token in input", Error);
    CHECK_THROWS_WITH_AS(corrupt(TokenSequence{5, Vocabulary::eos_id}, cfg_with(0.15, 1), v),
                         "reserved token in input", Error);
    CHECK_THROWS_AS(corrupt(TokenSequence{}, cfg_with(0.15, 1), v), Error);
    // Alternating mask: 5 spans need 6 sentinels.
    TokenSequence toks(10, 7);
    std::vector<bool> mask{true, false, true, false, true, false, true, false, true, false};
    CHECK_THROWS_WITH_AS(corrupt_with_mask(toks, mask, v, 5), doctest::Contains("too many spans"), Error);
    CHECK_NOTHROW(corrupt_with_mask(toks, mask, v, 6));
}

TEST_CASE("config validation") {
    SpanCorruptionConfig c;
    c.corruption_rate = 1.0;
    CHECK_THROWS_AS(c.validate(), Error);
    c.corruption_rate = 0.15;
    c.mean_span_length = 0.5;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("shard files round trip with a manifest") {
    const auto& v = test::corpus_vocab();
    Rng rng(3);
    std::vector<CorruptionExample> recs;
    for (int i = 0; i < 20; ++i) recs.push_back(corrupt(test::random_tokens(rng, v, 30), cfg_with(0.15, i), v));
    test::TempDir dir("shard");
    write_shard(dir / "s.tsv", recs, cfg_with(0.15, 0));
    const auto back = read_shard(dir / "s.tsv");
    REQUIRE(back.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        CHECK(back[i].input_ids == recs[i].input_ids);
        CHECK(back[i].target_ids == recs[i].target_ids);
    }
    const auto manifest = test::load_json(dir / "s.tsv.manifest.json");
    CHECK(manifest["records"] == 20);
    CHECK_THROWS_AS(parse_shard("1 2 3\n"), Error);
    CHECK_THROWS_AS(parse_shard("1 x\t2\n"), Error);
}
