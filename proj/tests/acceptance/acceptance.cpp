// Runs every acceptance criterion and prints one PASS/FAIL line each. Exits
// non-zero when any criterion fails.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cli_pipeline.hpp"
#include "metric_oracle.hpp"
#include "model_checks.hpp"
#include "reader_fuzz.hpp"
#include "t2tbio/corruption.hpp"
#include "t2tbio/metrics.hpp"
#include "t2tbio/task_codec.hpp"
#include "t2tbio/tokenizer.hpp"
#include "test_support.hpp"
#include "train_checks.hpp"

using namespace t2tbio;
using namespace t2tbio::test;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Outcome corruption_round_trip() {
    const auto t0 = Clock::now();
    const Vocabulary& v = corpus_vocab();
    Rng rng(1);
    std::size_t failures = 0;
    const std::array rates{0.1, 0.15, 0.3};
    for (int i = 0; i < 1000; ++i) {
        const std::size_t len = 5 + rng.below(508);
        const auto toks = random_tokens(rng, v, len);
        SpanCorruptionConfig cfg;
        cfg.corruption_rate = rates[static_cast<std::size_t>(i) % 3];
        cfg.seed = rng.next();
        if (reconstruct(corrupt(toks, cfg, v), v) != toks) ++failures;
    }
    const double s = seconds_since(t0);
    return {failures == 0 && s < 5.0, std::to_string(failures) + " failures in 1000, " + fmt("%.2fs", s)};
}

Outcome golden_sentence() {
    const Vocabulary& v = corpus_vocab();
    const std::vector<std::string> words{"IL",    "-",        "2",       "gene",     "expression", "and",
                                         "NF",    "-",        "kappa",   "B",        "activation", "through",
                                         "CD28",  "requires", "reactive", "oxygen",  "production", "by",
                                         "5",     "-",        "lipoxygenase"};
    const std::vector<std::vector<std::size_t>> groups{{0, 1, 2}, {8, 9}, {15, 16}};
    const std::vector<std::string> expect_spans{"IL - 2", "kappa B", "oxygen production"};

    TokenSequence toks;
    std::vector<bool> mask;
    for (std::size_t i = 0; i < words.size(); ++i) {
        const auto piece = encode(v, (i ? " " : "") + words[i]);
        bool masked = false;
        for (const auto& g : groups)
            for (auto w : g) masked |= w == i;
        toks.insert(toks.end(), piece.begin(), piece.end());
        mask.insert(mask.end(), piece.size(), masked);
    }
    std::vector<std::string> problems;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) problems.push_back(what);
    };
    expect(std::find(toks.begin(), toks.end(), Vocabulary::unk_id) == toks.end(), "sentence has unknown pieces");

    const auto ex = corrupt_with_mask(toks, mask, v, 100);
    // input: each masked group collapses to one sentinel, numbered in order
    std::vector<std::size_t> in_sent;
    for (std::size_t i = 0; i < ex.input_ids.size(); ++i) {
        if (!v.is_sentinel(ex.input_ids[i])) continue;
        in_sent.push_back(v.sentinel_index(ex.input_ids[i]));
        if (i + 1 < ex.input_ids.size()) expect(!v.is_sentinel(ex.input_ids[i + 1]), "adjacent input sentinels");
    }
    expect(in_sent == std::vector<std::size_t>{0, 1, 2}, "input sentinels are not s0 s1 s2");
    expect(ex.input_ids.front() == v.sentinel_id(0), "first span should open the input");
    expect(std::find(ex.input_ids.begin(), ex.input_ids.end(), Vocabulary::eos_id) == ex.input_ids.end(),
           "input must not contain eos");

    // target: s0 span s1 span s2 span s3 eos
    std::vector<std::size_t> tgt_sent;
    std::vector<TokenSequence> spans;
    for (TokenId t : ex.target_ids) {
        if (v.is_sentinel(t)) {
            tgt_sent.push_back(v.sentinel_index(t));
            spans.emplace_back();
        } else if (t != Vocabulary::eos_id && !spans.empty()) {
            spans.back().push_back(t);
        }
    }
    expect(tgt_sent == std::vector<std::size_t>{0, 1, 2, 3}, "target sentinels are not s0..s3");
    expect(ex.target_ids.size() >= 2 && ex.target_ids.back() == Vocabulary::eos_id, "target must end with eos");
    expect(ex.target_ids.size() >= 2 && ex.target_ids[ex.target_ids.size() - 2] == v.sentinel_id(3),
           "final sentinel must precede eos");
    if (spans.size() == 4) {
        for (std::size_t k = 0; k < 3; ++k) {
            expect(trim(decode(v, spans[k])) == expect_spans[k], "span " + std::to_string(k) + " decodes wrong");
        }
        expect(spans[3].empty(), "final sentinel must close the target");
    }
    expect(reconstruct(ex, v) == toks, "reconstruct does not restore the sentence");
    expect(decode(v, toks) ==
               "IL - 2 gene expression and NF - kappa B activation through CD28 requires reactive oxygen production "
               "by 5 - lipoxygenase",
           "sentence does not decode back");
    std::string detail = "3 input sentinels, 4 target sentinels, final sentinel before eos";
    if (!problems.empty()) detail = problems.front() + " (" + std::to_string(problems.size()) + " problems)";
    return {problems.empty(), detail};
}

Outcome ner_round_trip() {
    static const std::vector<std::string> pool{"lupus", "is", "a", "disease", "of", "the", "skin", "IL-2", "(", ")",
                                               ",", "p53", "*", "{", "}", "x*{", "}*y"};
    Rng rng(3);
    std::size_t failures = 0, total_spans = 0;
    for (int i = 0; i < 1000; ++i) {
        std::vector<std::string> words(1 + rng.below(30));
        for (auto& w : words) w = pool[rng.below(pool.size())];
        std::vector<EntitySpan> spans;
        const std::size_t want = rng.below(5);
        std::size_t pos = 0;
        for (std::size_t k = 0; k < want && pos < words.size(); ++k) {
            const std::size_t start = pos + rng.below(std::min<std::size_t>(3, words.size() - pos));
            if (start >= words.size()) break;
            const std::size_t end = start + rng.below(std::min<std::size_t>(3, words.size() - start));
            spans.push_back({start, end, "Disease"});
            pos = end + 1 + rng.below(2);
        }
        total_spans += spans.size();
        const auto ex = encode_ner(words, spans, "ner");
        if (decode_ner(ex.target_text, words, "Disease").spans != spans) ++failures;
    }
    return {failures == 0, std::to_string(failures) + " failures in 1000 (" + std::to_string(total_spans) + " spans)"};
}

Outcome gradient_check_toy() {
    const auto t0 = Clock::now();
    const auto cfg = toy_config();
    const auto res = gradient_check(cfg, init_params<double>(cfg, 21), make_batch(random_pairs(cfg, 8, 3, 7, 6)));
    const double s = seconds_since(t0);
    return {res.max_rel_error < 1e-4 && res.elements == parameter_count(cfg) && s < 60.0,
            "max relative error " + fmt("%.2e", res.max_rel_error) + " (" + res.worst_tensor + ") over " +
                std::to_string(res.elements) + " parameters, " + fmt("%.2fs", s)};
}

Outcome uniform_anchor() {
    double worst = 0;
    for (std::size_t V : {24, 517, 32000}) {
        auto cfg = toy_config();
        cfg.vocab_size = V;
        const double l = uniform_loss(cfg, 5, make_batch(random_pairs(cfg, V, 3, 6, 6)));
        worst = std::max(worst, std::abs(l - std::log(static_cast<double>(V))));
    }
    return {worst < 1e-6, "max |loss - ln V| = " + fmt("%.2e", worst)};
}

Outcome overfit_pretrain() {
    const auto t0 = Clock::now();
    const auto r = pretrain_overfit(300);
    const double s = seconds_since(t0);
    return {r.steps == 300 && r.final < 0.1 * r.initial && s < 300.0,
            "loss " + fmt("%.4f", r.initial) + " -> " + fmt("%.4f", r.final) + " (" +
                fmt("%.1f%%", 100.0 * r.final / r.initial) + " of initial) in 300 steps, " + fmt("%.1fs", s)};
}

Outcome overfit_copy() {
    const auto t0 = Clock::now();
    const auto r = finetune_overfit({{"copy", copy_examples("copy"), 1.0}}, 200);
    const double s = seconds_since(t0);
    const double em = r.exact_match.at("copy");
    return {em >= 0.95 && s < 300.0, "exact match " + fmt("%.3f", em) + " after 200 steps, " + fmt("%.1fs", s)};
}

Outcome overfit_mixture() {
    const auto t0 = Clock::now();
    const auto r = finetune_overfit({{"copy", copy_examples("copy"), 1.0}, {"reverse", reverse_examples("reverse"), 1.0}},
                                    300);
    const double s = seconds_since(t0);
    const double a = r.exact_match.at("copy"), b = r.exact_match.at("reverse");
    return {a >= 0.9 && b >= 0.9 && s < 300.0,
            "copy " + fmt("%.3f", a) + ", reverse " + fmt("%.3f", b) + " after 300 steps, " + fmt("%.1fs", s)};
}

Outcome metric_oracles() {
    const auto tallies = run_metric_oracles(1e-12);
    bool ok = tallies.size() == 5;
    std::size_t cases = 0, bad = 0;
    double worst = 0;
    for (const auto& [name, t] : tallies) {
        ok = ok && t.cases == 100 && t.mismatches == 0;
        cases += t.cases;
        bad += t.mismatches;
        worst = std::max(worst, t.max_abs_error);
    }
    return {ok, std::to_string(tallies.size()) + " metrics, " + std::to_string(cases) + " cases, " +
                    std::to_string(bad) + " mismatches, max error " + fmt("%.1e", worst)};
}

Outcome lenient_fixture() {
    // Three questions answered per snippet; only one snippet is right for each
    // of the first two, none for the third.
    const std::vector<QuestionGroup> groups{
        {{"kinase", "The RESID database.", "protein"}, {"RESID database", "RESID"}},
        {{"CFTR", "chloride"}, {"CFTR"}},
        {{"aspirin", "platelets"}, {"cyclooxygenase"}},
    };
    const double got = lenient_accuracy(groups);
    return {std::abs(got - 2.0 / 3.0) < 1e-15, "lenient accuracy " + fmt("%.6f", got) + " (expected 2/3)"};
}

// One run in-process, one through the built executable.
Outcome determinism() {
    TempDir a("accept-a"), b("accept-b"), scratch("accept-io");
    const auto r1 = run_pipeline(a.path());
    const auto r2 = run_pipeline(b.path(), 200, subprocess_runner(T2TBIO_CLI_BINARY, scratch.path()));
    if (!r1.ok || !r2.ok) return {false, "pipeline step failed: " + (r1.ok ? r2.failed_step : r1.failed_step)};
    std::size_t differing = 0;
    std::string first;
    for (const auto& [name, bytes] : r1.artifacts) {
        auto it = r2.artifacts.find(name);
        if (it == r2.artifacts.end() || it->second != bytes) {
            if (differing++ == 0) first = name;
        }
    }
    const bool same_set = r1.artifacts.size() == r2.artifacts.size();
    const bool has_core = r1.artifacts.contains("fine/checkpoint/weights.bin") &&
                          r1.artifacts.contains("predictions.jsonl") && r1.artifacts.contains("report.json");
    std::string detail = std::to_string(r1.artifacts.size()) + " artifacts compared, " + std::to_string(differing) +
                         " differ";
    if (!first.empty()) detail += " (first: " + first + ")";
    return {differing == 0 && same_set && has_core, detail};
}

Outcome reader_robustness() {
    const auto tallies = fuzz_readers(10000, 2000, 77);
    std::size_t unexpected = 0;
    std::string first;
    for (const auto& [name, t] : tallies) {
        unexpected += t.unexpected;
        if (t.unexpected && first.empty()) first = name + ": " + t.first_unexpected;
    }
    std::string detail = std::to_string(tallies.size()) + " readers x (10000 random + 2000 mutated), " +
                         std::to_string(unexpected) + " unstructured failures";
    if (!first.empty()) detail += " (" + first + ")";
    return {unexpected == 0 && tallies.size() == 7, detail};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"1 corruption round trip", corruption_round_trip},
        {"2 golden sentence corruption", golden_sentence},
        {"3 NER codec round trip", ner_round_trip},
        {"4 gradient check", gradient_check_toy},
        {"5 uniform-logit loss anchor", uniform_anchor},
        {"6a pretraining overfit", overfit_pretrain},
        {"6b copy-task overfit", overfit_copy},
        {"6c two-task prefixed mixture", overfit_mixture},
        {"7 metric oracle equivalence", metric_oracles},
        {"8 lenient accuracy semantics", lenient_fixture},
        {"9 deterministic pipeline", determinism},
        {"10 reader robustness", reader_robustness},
    };
    int failed = 0;
    for (const auto& [name, check] : criteria) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
        std::fflush(stdout);
        failed += o.pass ? 0 : 1;
    }
    std::printf("%d of %zu criteria failed\n", failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
