#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "t2tbio/corruption.hpp"
#include "t2tbio/model.hpp"
#include "t2tbio/task_codec.hpp"
#include "t2tbio/trainer.hpp"

namespace t2tbio {

// Recoverable oddities found while reading (healed tags, skipped records).
struct ReadReport {
    std::size_t warnings = 0;
    std::vector<std::string> messages;

    void warn(std::string msg);
};

struct NerSentence {
    std::vector<std::string> words;
    std::vector<EntitySpan> spans;
};

// Token-per-line BIO files: first column is the word, last column the tag,
// blank lines separate sentences, -DOCSTART- lines are ignored. An I- tag that
// does not continue an entity of the same type starts a new one (warning).
std::vector<NerSentence> parse_conll_ner(std::string_view text, ReadReport* report = nullptr);
std::vector<NerSentence> read_conll_ner(const std::filesystem::path& path, ReadReport* report = nullptr);

// Tab separated, no quoting: every line is split verbatim on tabs and must have
// exactly one field per declared column. Blank lines are skipped.
struct TsvSchema {
    std::vector<std::string> columns;
    bool has_header = false;
};
using TsvRecord = std::map<std::string, std::string>;

std::vector<TsvRecord> parse_tsv_pairs(std::string_view text, const TsvSchema& schema);
std::vector<TsvRecord> read_tsv_pairs(const std::filesystem::path& path, const TsvSchema& schema);

// BioASQ-style JSON: {"questions": [{"id", "body", "snippets": [{"text"}],
// "exact_answer": [...]}]}. Questions sharing an id are merged; questions left
// without snippets or answers are skipped with a warning.
std::vector<QAExample> parse_qa_json(std::string_view text, ReadReport* report = nullptr);
std::vector<QAExample> read_qa_json(const std::filesystem::path& path, ReadReport* report = nullptr);

// Line-delimited TaskExample JSON.
std::vector<TaskExample> parse_task_examples(std::string_view text);
std::vector<TaskExample> read_task_examples(const std::filesystem::path& path);
void write_task_examples(const std::filesystem::path& path, const std::vector<TaskExample>& examples);

// One document per non-empty line.
std::vector<std::string> read_lines(const std::filesystem::path& path);
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

struct LengthCaps {
    std::size_t input_len;
    std::size_t target_len;
};

// Default caps per task family: pretrain, ner, re, doc, nli, qa, copy.
LengthCaps default_lengths(std::string_view family);

struct DatasetSpec {
    std::string name;
    std::filesystem::path path;
    double weight = 1.0;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    SpanCorruptionConfig corruption;
    std::vector<DatasetSpec> pretrain_corpora;
    std::vector<DatasetSpec> mixture;
    std::filesystem::path vocab_path;
    std::filesystem::path out_dir;
    std::filesystem::path init_checkpoint;  // optional warm start
    std::uint64_t seed = 0;
    std::string family = "pretrain";
    double length_scale = 1.0;

    // Cross-field checks; model.vocab_size may still be 0 (filled from the vocab).
    void validate() const;
};

// Unknown keys are rejected with the dotted key path in the message. Relative
// paths resolve against base_dir. Lengths not given come from the family
// defaults, clipped to model.max_seq_len. Seed and out_dir may be overridden through
// T2TBIO_SEED and T2TBIO_OUT_DIR.
RunConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);
nlohmann::ordered_json config_to_json(const RunConfig& cfg);

}  // namespace t2tbio
