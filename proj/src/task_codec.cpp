#include "t2tbio/task_codec.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>

#include "t2tbio/error.hpp"

namespace t2tbio {

std::string task_prefix(std::string_view task_name) { return std::string(task_name) + ": "; }

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) out.emplace_back(text.substr(i, j - i));
        i = j;
    }
    return out;
}

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string to_lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

namespace {

void check_task_name(std::string_view task_name) {
    if (task_name.empty()) fail(ErrorKind::data, "empty task name");
    for (char c : task_name) {
        if (std::isspace(static_cast<unsigned char>(c)) || c == ':') {
            fail(ErrorKind::data, "task name must not contain whitespace or ':'");
        }
    }
}

void check_label(std::string_view label, const std::vector<std::string>& label_set) {
    if (std::find(label_set.begin(), label_set.end(), label) == label_set.end()) {
        fail(ErrorKind::data, "unknown label: " + std::string(label));
    }
}

}  // namespace

TaskExample encode_ner(const std::vector<std::string>& words, const std::vector<EntitySpan>& spans,
                       std::string_view task_name) {
    check_task_name(task_name);
    if (words.empty()) fail(ErrorKind::data, "empty sentence");
    for (const auto& w : words) {
        if (w == kEntityOpen || w == kEntityClose) fail(ErrorKind::data, "marker collision: " + w);
        if (w.empty() || std::any_of(w.begin(), w.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); })) {
            fail(ErrorKind::data, "invalid word: '" + w + "'");
        }
    }
    std::vector<EntitySpan> sorted = spans;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        if (sorted[i].start_word > sorted[i].end_word || sorted[i].end_word >= words.size()) {
            fail(ErrorKind::data, "entity span out of range");
        }
        if (i > 0 && sorted[i].start_word <= sorted[i - 1].end_word) fail(ErrorKind::data, "overlapping entities");
    }

    std::string input = task_prefix(task_name);
    std::string target;
    std::size_t next = 0;
    auto append = [&target](std::string_view w) {
        if (!target.empty()) target += ' ';
        target += w;
    };
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) input += ' ';
        input += words[i];
        const bool opens = next < sorted.size() && sorted[next].start_word == i;
        if (opens) append(kEntityOpen);
        append(words[i]);
        if (next < sorted.size() && sorted[next].end_word == i) {
            append(kEntityClose);
            ++next;
        }
    }
    NerGold gold;
    gold.entity_type = sorted.empty() ? std::string() : sorted.front().entity_type;
    gold.spans = std::move(sorted);
    return {std::string(task_name), std::move(input), std::move(target), std::move(gold)};
}

NerDecodeResult decode_ner(std::string_view generated, const std::vector<std::string>& source_words,
                           std::string_view entity_type) {
    NerDecodeResult result;
    struct Item {
        std::string word;
        int group;  // -1 outside any entity
    };

    // Resolve markers into balanced groups; unbalanced markers are dropped.
    std::vector<Item> items;
    int open_group = -1;
    std::size_t open_start = 0;
    int groups = 0;
    for (auto& tok : split_words(generated)) {
        if (tok == kEntityOpen) {
            if (open_group >= 0) {
                ++result.dropped_markers;
                for (std::size_t i = open_start; i < items.size(); ++i) items[i].group = -1;
            }
            open_group = groups++;
            open_start = items.size();
        } else if (tok == kEntityClose) {
            if (open_group < 0) {
                ++result.dropped_markers;
            } else {
                if (open_start == items.size()) ++result.dropped_markers;  // empty "*{ }*"
                open_group = -1;
            }
        } else {
            items.push_back({std::move(tok), open_group});
        }
    }
    if (open_group >= 0) {
        ++result.dropped_markers;
        for (std::size_t i = open_start; i < items.size(); ++i) items[i].group = -1;
    }

    // Left-to-right exact alignment against the source words.
    std::vector<std::ptrdiff_t> aligned(items.size(), -1);
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        for (std::size_t j = cursor; j < source_words.size(); ++j) {
            if (source_words[j] == items[i].word) {
                aligned[i] = static_cast<std::ptrdiff_t>(j);
                cursor = j + 1;
                break;
            }
        }
    }

    for (std::size_t i = 0; i < items.size();) {
        if (items[i].group < 0) {
            ++i;
            continue;
        }
        const int g = items[i].group;
        std::size_t j = i;
        bool ok = true;
        while (j < items.size() && items[j].group == g) {
            if (aligned[j] < 0 || (j > i && aligned[j] != aligned[j - 1] + 1)) ok = false;
            ++j;
        }
        if (ok) {
            result.spans.push_back({static_cast<std::size_t>(aligned[i]), static_cast<std::size_t>(aligned[j - 1]),
                                    std::string(entity_type)});
        } else {
            ++result.dropped_markers;
        }
        i = j;
    }
    return result;
}

TaskExample encode_re(std::string_view sentence, std::string_view label, std::string_view task_name,
                      const std::vector<std::string>& label_set, std::string_view negative_label) {
    check_task_name(task_name);
    check_label(label, label_set);
    LabelGold gold{std::string(label), label_set, std::string()};
    if (std::find(label_set.begin(), label_set.end(), negative_label) != label_set.end()) {
        gold.negative_label = std::string(negative_label);
    }
    return {std::string(task_name), task_prefix(task_name) + std::string(sentence), std::string(label),
            std::move(gold)};
}

TaskExample encode_nli(std::string_view premise, std::string_view hypothesis, std::string_view label) {
    check_label(label, nli_labels());
    std::string input = task_prefix(kNliTask) + "premise: " + std::string(premise) + " hypothesis: " +
                        std::string(hypothesis);
    return {std::string(kNliTask), std::move(input), std::string(label),
            LabelGold{std::string(label), nli_labels(), std::string()}};
}

TaskExample encode_doc(std::string_view text, const std::set<std::string>& labels, std::string_view task_name) {
    check_task_name(task_name);
    std::string target;
    for (const auto& l : labels) {  // std::set iterates in lexicographic order
        if (trim(l) != l || l.empty() || l.find(',') != std::string::npos) {
            fail(ErrorKind::data, "invalid document label: '" + l + "'");
        }
        if (!target.empty()) target += ", ";
        target += l;
    }
    if (target.empty()) target = "none";
    return {std::string(task_name), task_prefix(task_name) + std::string(text), std::move(target),
            LabelSetGold{std::vector<std::string>(labels.begin(), labels.end())}};
}

std::set<std::string> parse_doc_labels(std::string_view generated) {
    std::set<std::string> out;
    if (trim(generated) == "none") return out;
    std::size_t start = 0;
    while (start <= generated.size()) {
        auto comma = generated.find(',', start);
        if (comma == std::string_view::npos) comma = generated.size();
        auto label = trim(generated.substr(start, comma - start));
        if (!label.empty()) out.insert(std::move(label));
        start = comma + 1;
    }
    return out;
}

TaskExample encode_qa(const QAExample& q, std::size_t snippet_index, std::string_view task_name) {
    check_task_name(task_name);
    if (snippet_index >= q.snippets.size()) {
        fail(ErrorKind::data, "snippet index out of range: " + std::to_string(snippet_index));
    }
    if (q.gold_answers.empty()) fail(ErrorKind::data, "question has no gold answer");
    std::string input = task_prefix(task_name) + "question: " + q.question + " context: " + q.snippets[snippet_index];
    return {std::string(task_name), std::move(input), q.gold_answers.front(), AnswerGold{q.id, q.gold_answers}};
}

TaskExample encode_copy(std::string_view text, std::string_view task_name) {
    check_task_name(task_name);
    if (trim(text).empty()) fail(ErrorKind::data, "empty copy text");
    return {std::string(task_name), task_prefix(task_name) + std::string(text), std::string(text),
            TextGold{std::string(text)}};
}

std::size_t edit_distance(std::string_view a, std::string_view b) {
    std::vector<std::size_t> prev(b.size() + 1);
    std::vector<std::size_t> cur(b.size() + 1);
    std::iota(prev.begin(), prev.end(), std::size_t{0});
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

LabelDecodeResult decode_label(std::string_view generated, const std::vector<std::string>& label_set) {
    if (label_set.empty()) fail(ErrorKind::config, "empty label set");
    const std::string norm = to_lower(trim(generated));
    LabelDecodeResult r;
    for (const auto& l : label_set) {
        if (to_lower(l) == norm) {
            r.label = l;
            r.exact = true;
            return r;
        }
    }
    if (norm.empty()) {
        // Nothing to compare against: every label is equally far, so take the first.
        r.label = label_set.front();
        r.empty_fallback = true;
        r.distance = to_lower(r.label).size();
        return r;
    }
    std::size_t best = SIZE_MAX;
    for (const auto& l : label_set) {
        const std::size_t d = edit_distance(norm, to_lower(l));
        if (d < best) {
            best = d;
            r.label = l;
        }
    }
    r.distance = best;
    return r;
}

nlohmann::ordered_json gold_to_json(const Gold& g) {
    nlohmann::ordered_json j;
    std::visit(
        [&j](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, NerGold>) {
                j["kind"] = "ner";
                j["entity_type"] = v.entity_type;
                auto spans = nlohmann::ordered_json::array();
                for (const auto& s : v.spans) spans.push_back({s.start_word, s.end_word, s.entity_type});
                j["spans"] = std::move(spans);
            } else if constexpr (std::is_same_v<V, LabelGold>) {
                j["kind"] = "label";
                j["label"] = v.label;
                j["label_set"] = v.label_set;
                j["negative_label"] = v.negative_label;
            } else if constexpr (std::is_same_v<V, LabelSetGold>) {
                j["kind"] = "labels";
                j["labels"] = v.labels;
            } else if constexpr (std::is_same_v<V, AnswerGold>) {
                j["kind"] = "qa";
                j["question_id"] = v.question_id;
                j["answers"] = v.answers;
            } else {
                j["kind"] = "text";
                j["text"] = v.text;
            }
        },
        g);
    return j;
}

Gold gold_from_json(const nlohmann::json& j) {
    try {
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "ner") {
            NerGold g;
            g.entity_type = j.at("entity_type").get<std::string>();
            for (const auto& s : j.at("spans")) {
                if (!s.is_array() || s.size() != 3 || !s[0].is_number_unsigned() || !s[1].is_number_unsigned()) fail(ErrorKind::data, "gold span must be [start, end, type]");
                g.spans.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::string>()});
            }
            return g;
        }
        if (kind == "label") {
            return LabelGold{j.at("label").get<std::string>(), j.at("label_set").get<std::vector<std::string>>(),
                             j.value("negative_label", std::string())};
        }
        if (kind == "labels") return LabelSetGold{j.at("labels").get<std::vector<std::string>>()};
        if (kind == "qa") {
            return AnswerGold{j.at("question_id").get<std::string>(), j.at("answers").get<std::vector<std::string>>()};
        }
        if (kind == "text") return TextGold{j.at("text").get<std::string>()};
        fail(ErrorKind::data, "unknown gold kind: " + kind);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::data, std::string("bad gold record: ") + e.what());
    }
}

nlohmann::ordered_json to_json(const TaskExample& ex) {
    nlohmann::ordered_json j;
    j["task"] = ex.task_name;
    j["input"] = ex.input_text;
    j["target"] = ex.target_text;
    j["gold"] = gold_to_json(ex.gold);
    return j;
}

TaskExample task_example_from_json(const nlohmann::json& j) {
    try {
        TaskExample ex;
        ex.task_name = j.at("task").get<std::string>();
        ex.input_text = j.at("input").get<std::string>();
        ex.target_text = j.at("target").get<std::string>();
        ex.gold = gold_from_json(j.at("gold"));
        if (ex.input_text.rfind(task_prefix(ex.task_name), 0) != 0) {
            fail(ErrorKind::data, "input does not start with task prefix '" + task_prefix(ex.task_name) + "'");
        }
        return ex;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::data, std::string("bad task example: ") + e.what());
    }
}

}  // namespace t2tbio
