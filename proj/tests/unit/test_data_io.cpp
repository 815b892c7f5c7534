#include <doctest.h>

#include <cstdlib>

#include "reader_fuzz.hpp"
#include "t2tbio/data_io.hpp"
#include "t2tbio/error.hpp"
#include "test_support.hpp"

using namespace t2tbio;
using namespace t2tbio::test;

namespace {

template <typename F>
std::string error_text(F&& f, ErrorKind want) {
    try {
        f();
    } catch (const Error& e) {
        CHECK(e.kind() == want);
        return e.what();
    }
    FAIL("expected an error");
    return {};
}

// Restores an environment variable on scope exit.
struct EnvGuard {
    std::string name;
    explicit EnvGuard(std::string n, const char* value) : name(std::move(n)) { ::setenv(name.c_str(), value, 1); }
    ~EnvGuard() { ::unsetenv(name.c_str()); }
};

}  // namespace

TEST_CASE("conll: small examples") {
    auto s = parse_conll_ner("Lupus B-Disease\nis O\n");
    REQUIRE(s.size() == 1);
    CHECK(s[0].words == std::vector<std::string>{"Lupus", "is"});
    CHECK(s[0].spans == std::vector<EntitySpan>{{0, 0, "Disease"}});
    CHECK(parse_conll_ner("").empty());
    CHECK(parse_conll_ner("\n\n-DOCSTART- O\n\n").empty());
    // extra middle columns are ignored; CRLF endings are accepted
    s = parse_conll_ner("heart NN B-Disease\r\nfailure NN I-Disease\r\n\r\nok NN O\r\n");
    REQUIRE(s.size() == 2);
    CHECK(s[0].spans == std::vector<EntitySpan>{{0, 1, "Disease"}});
    CHECK(s[1].spans.empty());
    // adjacent B- tags are separate entities; a type change inside I- starts a new one
    ReadReport rep;
    s = parse_conll_ner("a B-X\nb B-X\nc I-Y\n", &rep);
    CHECK(s[0].spans == std::vector<EntitySpan>{{0, 0, "X"}, {1, 1, "X"}, {2, 2, "Y"}});
    CHECK(rep.warnings == 1);
}

TEST_CASE("conll: fixture") {
    ReadReport rep;
    const auto s = read_conll_ner(fixture("ner_disease.conll"), &rep);
    REQUIRE(s.size() == 6);
    CHECK(s[0].spans == std::vector<EntitySpan>{{0, 0, "Disease"}, {4, 5, "Disease"}});
    CHECK(s[1].spans == std::vector<EntitySpan>{{2, 3, "Disease"}});
    CHECK(s[3].spans == std::vector<EntitySpan>{{0, 2, "Disease"}, {7, 8, "Disease"}});
    CHECK(s[4].spans.empty());
    // orphan I- at sentence start is healed into a new entity
    CHECK(s[5].spans == std::vector<EntitySpan>{{0, 0, "Disease"}});
    REQUIRE(rep.warnings == 1);
    CHECK(rep.messages[0].find("line 45") != std::string::npos);
}

TEST_CASE("conll: errors name the line") {
    auto msg = error_text([] { (void)parse_conll_ner("a O\nb X-Disease\n"); }, ErrorKind::data);
    CHECK(msg.find("line 2") != std::string::npos);
    msg = error_text([] { (void)parse_conll_ner("a O\n\nlonely\n"); }, ErrorKind::data);
    CHECK(msg.find("line 3") != std::string::npos);
    (void)error_text([] { (void)parse_conll_ner("a O\nb B-\n"); }, ErrorKind::data);
    (void)error_text([] { (void)parse_conll_ner("*{ O\n"); }, ErrorKind::data);
    (void)error_text([] { (void)read_conll_ner("/nonexistent/file.conll"); }, ErrorKind::data);
}

TEST_CASE("tsv pairs") {
    auto r = parse_tsv_pairs("a b\tCPR:3\nc\tfalse\n", {{"sentence", "label"}, false});
    REQUIRE(r.size() == 2);
    CHECK(r[0].at("sentence") == "a b");
    CHECK(r[1].at("label") == "false");
    auto msg = error_text([] { (void)parse_tsv_pairs("x\ty\n\nonly one\n", {{"sentence", "label"}, false}); },
                          ErrorKind::data);
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("expected 2 columns, found 1") != std::string::npos);
    // no quoting: a tab inside quotes still splits the field
    msg = error_text([] { (void)parse_tsv_pairs("\"a\tb\"\tc\n", {{"sentence", "label"}, false}); }, ErrorKind::data);
    CHECK(msg.find("found 3") != std::string::npos);
    r = parse_tsv_pairs("\"quoted\"\tx\r\n", {{"sentence", "label"}, false});
    CHECK(r[0].at("sentence") == "\"quoted\"");
    CHECK(r[0].at("label") == "x");

    const auto nli = read_tsv_pairs(fixture("nli_mednli.tsv"), {{"premise", "hypothesis", "label"}, true});
    REQUIRE(nli.size() == 4);
    CHECK(nli[1].at("label") == "contradiction");
    CHECK(read_tsv_pairs(fixture("re_chemprot.tsv"), {{"sentence", "label"}, false}).size() == 5);
    CHECK(read_tsv_pairs(fixture("doc_hoc.tsv"), {{"text", "labels"}, false}).size() == 4);
    (void)error_text([] { (void)parse_tsv_pairs("a\n", {{}, false}); }, ErrorKind::config);
    (void)error_text([] { (void)parse_tsv_pairs("a\ta\n", {{"x", "x"}, false}); }, ErrorKind::config);
}

TEST_CASE("qa json: merge and skip") {
    ReadReport rep;
    const auto qs = read_qa_json(fixture("qa_bioasq.json"), &rep);
    REQUIRE(qs.size() == 2);
    CHECK(qs[0].id == "q1");
    CHECK(qs[0].snippets.size() == 2);
    CHECK(qs[0].gold_answers == std::vector<std::string>{"RESID database", "RESID"});
    CHECK(qs[1].id == "q2");
    CHECK(qs[1].snippets.size() == 2);
    CHECK(qs[1].gold_answers == std::vector<std::string>{"CFTR"});
    REQUIRE(rep.warnings == 1);
    CHECK(rep.messages[0].find("q3") != std::string::npos);

    (void)error_text([] { (void)parse_qa_json("[]"); }, ErrorKind::data);
    (void)error_text([] { (void)parse_qa_json("{\"questions\": [{\"id\": 3}]}"); }, ErrorKind::data);
    (void)error_text([] { (void)parse_qa_json("{\"questions\": [1]}"); }, ErrorKind::data);
    (void)error_text([] { (void)parse_qa_json("{"); }, ErrorKind::data);
    CHECK(parse_qa_json("{\"questions\": []}").empty());
}

TEST_CASE("task example jsonl round trip") {
    TempDir dir("tasks");
    std::vector<TaskExample> ex{encode_copy("aspirin reduces fever", "copy"),
                                encode_ner({"Lupus", "is", "bad"}, {{0, 0, "Disease"}}, "ncbi"),
                                encode_nli("p", "h", "neutral")};
    write_task_examples(dir / "sub" / "t.jsonl", ex);
    const auto back = read_task_examples(dir / "sub" / "t.jsonl");
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].input_text == ex[i].input_text);
        CHECK(back[i].target_text == ex[i].target_text);
        CHECK(to_json(back[i]) == to_json(ex[i]));
    }
    auto msg = error_text([] { (void)parse_task_examples("{}\n"); }, ErrorKind::data);
    CHECK(msg.find("line 1") != std::string::npos);
    msg = error_text([] { (void)parse_task_examples("\n\n[1,2]\n"); }, ErrorKind::data);
    CHECK(msg.find("line 3") != std::string::npos);
}

TEST_CASE("every task family has a fixture") {
    for (const char* f : {"pretrain_corpus.txt", "copy.txt", "ner_disease.conll", "re_chemprot.tsv", "nli_mednli.tsv",
                          "doc_hoc.tsv", "qa_bioasq.json"}) {
        INFO(f);
        CHECK(std::filesystem::exists(fixture(f)));
        CHECK(!read_file(fixture(f)).empty());
    }
    CHECK(corpus_lines().size() == 30);
    for (const char* fam : {"pretrain", "ner", "re", "doc", "nli", "qa", "copy"}) CHECK(default_lengths(fam).input_len > 0);
    CHECK(default_lengths("re").target_len == 16);
    (void)error_text([] { (void)default_lengths("poetry"); }, ErrorKind::config);
}

TEST_CASE("config: minimal, defaults, paths") {
    const auto c = parse_config(R"({"vocab_path": "v.txt", "mixture": [{"name": "copy", "path": "c.jsonl"}],
                                    "train": {"family": "re"}})",
                                "/base");
    CHECK(c.vocab_path == std::filesystem::path("/base/v.txt"));
    CHECK(c.mixture.at(0).path == std::filesystem::path("/base/c.jsonl"));
    CHECK(c.mixture.at(0).weight == 1.0);
    CHECK(c.train.input_len == 128);  // re caps clipped by the default max_seq_len
    CHECK(c.train.target_len == 16);

    const auto tiny = load_config(config_file("pretrain_tiny.json"));
    CHECK(tiny.model.d_model == 32);
    CHECK(tiny.train.num_steps == 300);
    CHECK(tiny.seed == 7);
    CHECK(tiny.corruption.seed == 7);
    CHECK(tiny.train.seed == 7);
    CHECK(tiny.pretrain_corpora.at(0).path.lexically_normal() == fixture("pretrain_corpus.txt").lexically_normal());
    CHECK(tiny.vocab_path == config_file("vocab.txt"));

    const auto abs = parse_config(R"({"vocab_path": "/abs/v.txt"})", "/base");
    CHECK(abs.vocab_path == std::filesystem::path("/abs/v.txt"));

    // config_to_json is accepted back
    const auto again = parse_config(config_to_json(tiny).dump(), "/elsewhere");
    CHECK(again.model == tiny.model);
    CHECK(again.train.learning_rate == tiny.train.learning_rate);
    CHECK(again.vocab_path == tiny.vocab_path);
}

TEST_CASE("config: errors") {
    auto msg = error_text([] { (void)parse_config(R"({"train": {"learing_rate": 0.1}})"); }, ErrorKind::config);
    CHECK(msg.find("train.learing_rate") != std::string::npos);
    msg = error_text([] { (void)parse_config(R"({"colour": 1})"); }, ErrorKind::config);
    CHECK(msg.find("colour") != std::string::npos);
    msg = error_text([] { (void)parse_config(R"({"model": {"max_seq_len": 32}, "train": {"target_len": 64}})"); },
                     ErrorKind::config);
    CHECK(msg.find("target_len") != std::string::npos);
    (void)error_text([] { (void)parse_config(R"({"model": {"d_model": "big"}})"); }, ErrorKind::config);
    (void)error_text([] { (void)parse_config(R"({"train": {"batch_size": -1}})"); }, ErrorKind::config);
    (void)error_text([] { (void)parse_config(R"({"mixture": [{"name": "a"}]})"); }, ErrorKind::config);
    (void)error_text([] { (void)parse_config(R"({"mixture": [{"name": "a", "path": "x", "weight": -1}]})"); },
                     ErrorKind::config);
    (void)error_text(
        [] {
            (void)parse_config(R"({"mixture": [{"name": "a", "path": "x"}, {"name": "a", "path": "y"}]})");
        },
        ErrorKind::config);
    (void)error_text([] { (void)parse_config("not json"); }, ErrorKind::config);
    (void)error_text([] { (void)parse_config("[]"); }, ErrorKind::config);
    (void)error_text([] { (void)parse_config(R"({"corruption": {"rate": 1.5}})"); }, ErrorKind::config);
    (void)error_text([] { (void)load_config("/nonexistent/config.json"); }, ErrorKind::data);
}

TEST_CASE("config: environment overrides") {
    {
        EnvGuard seed("T2TBIO_SEED", "123");
        EnvGuard out("T2TBIO_OUT_DIR", "/tmp/env-out");
        const auto c = parse_config(R"({"seed": 5, "out_dir": "runs"})", "/base");
        CHECK(c.seed == 123);
        CHECK(c.train.seed == 123);
        CHECK(c.corruption.seed == 123);
        CHECK(c.out_dir == std::filesystem::path("/tmp/env-out"));
    }
    {
        EnvGuard seed("T2TBIO_SEED", "12x");
        (void)error_text([] { (void)parse_config("{}"); }, ErrorKind::config);
    }
    const auto c = parse_config(R"({"seed": 5, "out_dir": "runs"})", "/base");
    CHECK(c.seed == 5);
    CHECK(c.out_dir == std::filesystem::path("/base/runs"));
}

TEST_CASE("readers are deterministic") {
    CHECK(read_conll_ner(fixture("ner_disease.conll")).size() == read_conll_ner(fixture("ner_disease.conll")).size());
    const auto a = read_qa_json(fixture("qa_bioasq.json"));
    const auto b = read_qa_json(fixture("qa_bioasq.json"));
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].snippets == b[i].snippets);
        CHECK(a[i].gold_answers == b[i].gold_answers);
    }
}

TEST_CASE("readers only raise structured errors") {
    const auto tallies = fuzz_readers(1000, 1000, 2024);
    CHECK(tallies.size() == 7);
    for (const auto& [name, t] : tallies) {
        INFO(name << ": " << t.first_unexpected);
        CHECK(t.unexpected == 0);
        CHECK(t.accepted + t.rejected == 2000);
    }
    // mutated seeds should sometimes survive
    CHECK(tallies.at("conll").accepted > 0);
    CHECK(tallies.at("tsv").accepted > 0);
}
