#pragma once

#include <cstddef>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

namespace t2tbio {

inline constexpr std::string_view kEntityOpen = "*{";
inline constexpr std::string_view kEntityClose = "}*";

struct EntitySpan {
    std::size_t start_word = 0;  // inclusive
    std::size_t end_word = 0;    // inclusive
    std::string entity_type;

    friend auto operator<=>(const EntitySpan&, const EntitySpan&) = default;
};

struct QAExample {
    std::string id;
    std::string question;
    std::vector<std::string> snippets;
    std::vector<std::string> gold_answers;
};

// Structured gold carried alongside each serialised example.
struct NerGold {
    std::string entity_type;
    std::vector<EntitySpan> spans;
};
struct LabelGold {
    std::string label;
    std::vector<std::string> label_set;
    std::string negative_label;  // empty when every class is positive
};
struct LabelSetGold {
    std::vector<std::string> labels;
};
struct AnswerGold {
    std::string question_id;
    std::vector<std::string> answers;
};
struct TextGold {
    std::string text;
};
using Gold = std::variant<NerGold, LabelGold, LabelSetGold, AnswerGold, TextGold>;

struct TaskExample {
    std::string task_name;
    std::string input_text;
    std::string target_text;
    Gold gold;
};

inline constexpr std::string_view kNliTask = "mednli";
inline const std::vector<std::string>& nli_labels() {
    static const std::vector<std::string> labels{"entailment", "contradiction", "neutral"};
    return labels;
}

std::string task_prefix(std::string_view task_name);

// Wraps each entity as "*{ w ... }*"; the type is implied by the task name.
TaskExample encode_ner(const std::vector<std::string>& words, const std::vector<EntitySpan>& spans,
                       std::string_view task_name);

struct NerDecodeResult {
    std::vector<EntitySpan> spans;
    std::size_t dropped_markers = 0;
};

// Total inverse of encode_ner over arbitrary generated text. Generated words are
// aligned to source words left to right by exact match (a word that matches no
// remaining source word is skipped); an entity survives only when every word in
// it aligns to consecutive source words.
NerDecodeResult decode_ner(std::string_view generated, const std::vector<std::string>& source_words,
                           std::string_view entity_type = {});

TaskExample encode_re(std::string_view sentence, std::string_view label, std::string_view task_name,
                      const std::vector<std::string>& label_set, std::string_view negative_label = "false");

TaskExample encode_nli(std::string_view premise, std::string_view hypothesis, std::string_view label);

TaskExample encode_doc(std::string_view text, const std::set<std::string>& labels, std::string_view task_name);
// Inverse of the doc target format: "none" -> {}, otherwise split on ",".
std::set<std::string> parse_doc_labels(std::string_view generated);

TaskExample encode_qa(const QAExample& q, std::size_t snippet_index, std::string_view task_name);

// Target equals the text itself; used for copy-style tasks.
TaskExample encode_copy(std::string_view text, std::string_view task_name);

struct LabelDecodeResult {
    std::string label;
    bool exact = false;
    bool empty_fallback = false;
    std::size_t distance = 0;
};

// Trimmed, case-insensitive exact match; otherwise the nearest label by edit
// distance with ties going to the earlier label. Empty output maps to the first label.
LabelDecodeResult decode_label(std::string_view generated, const std::vector<std::string>& label_set);

std::size_t edit_distance(std::string_view a, std::string_view b);

std::vector<std::string> split_words(std::string_view text);
std::string trim(std::string_view s);
std::string to_lower(std::string_view s);

// One JSON object per line: {"task", "input", "target", "gold"}.
nlohmann::ordered_json to_json(const TaskExample& ex);
TaskExample task_example_from_json(const nlohmann::json& j);
nlohmann::ordered_json gold_to_json(const Gold& g);
Gold gold_from_json(const nlohmann::json& j);

}  // namespace t2tbio
