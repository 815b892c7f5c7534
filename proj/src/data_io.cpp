#include "t2tbio/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "t2tbio/error.hpp"

namespace t2tbio {

namespace fs = std::filesystem;

void ReadReport::warn(std::string msg) {
    ++warnings;
    messages.push_back(std::move(msg));
}

namespace {

// Splits on '\n', dropping one trailing '\r' per line. Line numbers start at 1.
template <typename F>
void for_each_line(std::string_view text, F&& f) {
    std::size_t lineno = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        f(++lineno, line);
        pos = end + 1;
    }
}

std::string at_line(std::size_t lineno, std::string_view msg) {
    return "line " + std::to_string(lineno) + ": " + std::string(msg);
}

bool blank(std::string_view s) {
    return s.find_first_not_of(" \t\r\v\f") == std::string_view::npos;
}

}  // namespace

std::vector<NerSentence> parse_conll_ner(std::string_view text, ReadReport* report) {
    std::vector<NerSentence> out;
    NerSentence cur;
    // Entity being extended by I- tags; empty type means none open.
    std::string open_type;
    auto flush = [&] {
        if (!cur.words.empty()) out.push_back(std::move(cur));
        cur = {};
        open_type.clear();
    };
    for_each_line(text, [&](std::size_t lineno, std::string_view line) {
        if (blank(line)) {
            flush();
            return;
        }
        const auto cols = split_words(line);
        if (cols.front() == "-DOCSTART-") {
            flush();
            return;
        }
        if (cols.size() < 2) fail(ErrorKind::data, at_line(lineno, "expected a word and a tag"));
        const std::string& word = cols.front();
        const std::string& tag = cols.back();
        const std::size_t idx = cur.words.size();
        if (word == kEntityOpen || word == kEntityClose) {
            fail(ErrorKind::data, at_line(lineno, "word collides with an entity marker"));
        }
        if (tag == "O") {
            open_type.clear();
        } else if (tag.size() > 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') {
            const std::string type = tag.substr(2);
            if (tag[0] == 'I' && type == open_type) {
                cur.spans.back().end_word = idx;
            } else {
                if (tag[0] == 'I' && report) {
                    report->warn(at_line(lineno, "I-" + type + " without a preceding entity; treated as B-" + type));
                }
                cur.spans.push_back({idx, idx, type});
                open_type = type;
            }
        } else {
            fail(ErrorKind::data, at_line(lineno, "bad tag '" + tag + "'"));
        }
        cur.words.push_back(word);
    });
    flush();
    return out;
}

std::vector<NerSentence> read_conll_ner(const fs::path& path, ReadReport* report) {
    return parse_conll_ner(read_file(path), report);
}

std::vector<TsvRecord> parse_tsv_pairs(std::string_view text, const TsvSchema& schema) {
    if (schema.columns.empty()) fail(ErrorKind::config, "tsv schema has no columns");
    {
        std::set<std::string> seen(schema.columns.begin(), schema.columns.end());
        if (seen.size() != schema.columns.size()) fail(ErrorKind::config, "tsv schema repeats a column name");
    }
    std::vector<TsvRecord> out;
    bool header_pending = schema.has_header;
    for_each_line(text, [&](std::size_t lineno, std::string_view line) {
        if (line.empty()) return;
        std::vector<std::string_view> fields;
        std::size_t pos = 0;
        while (true) {
            const std::size_t tab = line.find('\t', pos);
            fields.push_back(line.substr(pos, tab == std::string_view::npos ? std::string_view::npos : tab - pos));
            if (tab == std::string_view::npos) break;
            pos = tab + 1;
        }
        if (fields.size() != schema.columns.size()) {
            fail(ErrorKind::data, at_line(lineno, "expected " + std::to_string(schema.columns.size()) +
                                                      " columns, found " + std::to_string(fields.size())));
        }
        if (header_pending) {
            header_pending = false;
            return;
        }
        TsvRecord rec;
        for (std::size_t i = 0; i < fields.size(); ++i) rec[schema.columns[i]] = std::string(fields[i]);
        out.push_back(std::move(rec));
    });
    return out;
}

std::vector<TsvRecord> read_tsv_pairs(const fs::path& path, const TsvSchema& schema) {
    return parse_tsv_pairs(read_file(path), schema);
}

namespace {

void collect_answers(const nlohmann::json& node, std::vector<std::string>& out) {
    if (node.is_string()) {
        const std::string s = trim(node.get<std::string>());
        if (!s.empty()) out.push_back(s);
    } else if (node.is_array()) {
        for (const auto& child : node) collect_answers(child, out);
    } else if (!node.is_null()) {
        fail(ErrorKind::data, "exact_answer must be a string or a list of strings");
    }
}

}  // namespace

std::vector<QAExample> parse_qa_json(std::string_view text, ReadReport* report) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::data, std::string("invalid QA json: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("questions") || !doc["questions"].is_array()) {
        fail(ErrorKind::data, "QA json needs a top-level \"questions\" array");
    }
    std::vector<QAExample> merged;
    std::map<std::string, std::size_t> index;
    std::size_t n = 0;
    for (const auto& q : doc["questions"]) {
        const std::string where = "question " + std::to_string(n++);
        if (!q.is_object()) fail(ErrorKind::data, where + ": not an object");
        if (!q.contains("id") || !q["id"].is_string()) fail(ErrorKind::data, where + ": missing string \"id\"");
        if (!q.contains("body") || !q["body"].is_string()) fail(ErrorKind::data, where + ": missing string \"body\"");
        const std::string id = q["id"].get<std::string>();
        QAExample ex;
        ex.id = id;
        ex.question = q["body"].get<std::string>();
        if (q.contains("snippets")) {
            if (!q["snippets"].is_array()) fail(ErrorKind::data, where + ": \"snippets\" must be an array");
            for (const auto& s : q["snippets"]) {
                if (!s.is_object() || !s.contains("text") || !s["text"].is_string()) {
                    fail(ErrorKind::data, where + ": snippet without string \"text\"");
                }
                ex.snippets.push_back(s["text"].get<std::string>());
            }
        }
        if (q.contains("exact_answer")) {
            try {
                collect_answers(q["exact_answer"], ex.gold_answers);
            } catch (const Error& e) {
                fail(ErrorKind::data, where + ": " + e.what());
            }
        }
        auto [it, inserted] = index.emplace(id, merged.size());
        if (inserted) {
            merged.push_back(std::move(ex));
            continue;
        }
        auto& prev = merged[it->second];
        prev.snippets.insert(prev.snippets.end(), ex.snippets.begin(), ex.snippets.end());
        for (auto& a : ex.gold_answers) {
            if (std::find(prev.gold_answers.begin(), prev.gold_answers.end(), a) == prev.gold_answers.end()) {
                prev.gold_answers.push_back(std::move(a));
            }
        }
    }
    std::vector<QAExample> out;
    for (auto& q : merged) {
        if (q.snippets.empty() || q.gold_answers.empty()) {
            if (report) {
                report->warn("question " + q.id + " skipped: " +
                             (q.snippets.empty() ? "no snippets" : "no gold answers"));
            }
            continue;
        }
        out.push_back(std::move(q));
    }
    return out;
}

std::vector<QAExample> read_qa_json(const fs::path& path, ReadReport* report) {
    return parse_qa_json(read_file(path), report);
}

std::vector<TaskExample> parse_task_examples(std::string_view text) {
    std::vector<TaskExample> out;
    for_each_line(text, [&](std::size_t lineno, std::string_view line) {
        if (blank(line)) return;
        try {
            out.push_back(task_example_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::data, at_line(lineno, e.what()));
        } catch (const Error& e) {
            fail(ErrorKind::data, at_line(lineno, e.what()));
        }
    });
    return out;
}

std::vector<TaskExample> read_task_examples(const fs::path& path) {
    try {
        return parse_task_examples(read_file(path));
    } catch (const Error& e) {
        fail(e.kind(), path.string() + ": " + e.what());
    }
}

void write_task_examples(const fs::path& path, const std::vector<TaskExample>& examples) {
    std::string buf;
    for (const auto& ex : examples) {
        buf += to_json(ex).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
        buf += '\n';
    }
    write_file(path, buf);
}

std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::data, "cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, std::string_view contents) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f) fail(ErrorKind::data, "cannot write " + path.string());
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::vector<std::string> out;
    for_each_line(read_file(path), [&](std::size_t, std::string_view line) {
        if (!blank(line)) out.emplace_back(line);
    });
    return out;
}

LengthCaps default_lengths(std::string_view family) {
    if (family == "pretrain") return {1024, 1024};
    if (family == "ner") return {512, 512};
    if (family == "re") return {256, 16};
    if (family == "doc") return {256, 64};
    if (family == "nli") return {256, 12};
    if (family == "qa") return {512, 128};
    if (family == "copy") return {512, 512};
    fail(ErrorKind::config, "unknown task family: " + std::string(family));
}

void RunConfig::validate() const {
    ModelConfig m = model;
    if (m.vocab_size == 0) m.vocab_size = 1;
    m.validate();
    corruption.validate();
    if (train.input_len > model.max_seq_len) {
        fail(ErrorKind::config, "train.input_len (" + std::to_string(train.input_len) + ") exceeds model.max_seq_len (" +
                                    std::to_string(model.max_seq_len) + ")");
    }
    if (train.target_len > model.max_seq_len) {
        fail(ErrorKind::config, "train.target_len (" + std::to_string(train.target_len) +
                                    ") exceeds model.max_seq_len (" + std::to_string(model.max_seq_len) + ")");
    }
    train.validate(m);
    for (const auto* list : {&pretrain_corpora, &mixture}) {
        std::set<std::string> names;
        for (const auto& d : *list) {
            if (!names.insert(d.name).second) fail(ErrorKind::config, "duplicate dataset name: " + d.name);
            if (!std::isfinite(d.weight) || d.weight < 0.0) {
                fail(ErrorKind::config, "weight of " + d.name + " must be finite and non-negative");
            }
        }
    }
}

namespace {

using Json = nlohmann::json;

void reject_unknown(const Json& obj, const std::string& where, std::initializer_list<std::string_view> allowed) {
    if (!obj.is_object()) fail(ErrorKind::config, (where.empty() ? "config" : where) + " must be an object");
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) fail(ErrorKind::config, "unknown config key: " + (where.empty() ? key : where + "." + key));
    }
}

template <typename T>
void read_field(const Json& obj, const std::string& where, const char* key, T& out) {
    if (!obj.contains(key)) return;
    const Json& v = obj[key];
    const std::string name = where.empty() ? key : where + "." + key;
    if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) fail(ErrorKind::config, name + " must be a string");
        out = v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) fail(ErrorKind::config, name + " must be a number");
        out = v.get<T>();
    } else {
        if (!v.is_number_unsigned()) fail(ErrorKind::config, name + " must be a non-negative integer");
        out = v.get<T>();
    }
}

fs::path resolve(const fs::path& base, const std::string& p) {
    if (p.empty()) return {};
    fs::path path(p);
    return path.is_relative() && !base.empty() ? base / path : path;
}

std::vector<DatasetSpec> read_datasets(const Json& j, const std::string& where, const fs::path& base) {
    if (!j.is_array()) fail(ErrorKind::config, where + " must be an array");
    std::vector<DatasetSpec> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string at = where + "[" + std::to_string(i) + "]";
        reject_unknown(j[i], at, {"name", "path", "weight"});
        DatasetSpec d;
        std::string path;
        read_field(j[i], at, "name", d.name);
        read_field(j[i], at, "path", path);
        read_field(j[i], at, "weight", d.weight);
        if (path.empty()) fail(ErrorKind::config, at + ".path is required");
        if (d.name.empty()) d.name = fs::path(path).stem().string();
        d.path = resolve(base, path);
        out.push_back(std::move(d));
    }
    return out;
}

std::size_t scaled(std::size_t n, double scale) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n) * scale)));
}

}  // namespace

RunConfig parse_config(std::string_view text, const fs::path& base_dir) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::config, std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c;
    reject_unknown(j, "", {"model", "train", "corruption", "pretrain_corpora", "mixture", "vocab_path", "out_dir",
                           "init_checkpoint", "seed"});
    read_field(j, "", "seed", c.seed);
    if (j.contains("model")) {
        const Json& m = j["model"];
        reject_unknown(m, "model", {"vocab_size", "d_model", "n_heads", "d_ff", "n_encoder_layers", "n_decoder_layers",
                                    "rel_pos_buckets", "rel_pos_max_distance", "max_seq_len", "dropout_rate"});
        read_field(m, "model", "vocab_size", c.model.vocab_size);
        read_field(m, "model", "d_model", c.model.d_model);
        read_field(m, "model", "n_heads", c.model.n_heads);
        read_field(m, "model", "d_ff", c.model.d_ff);
        read_field(m, "model", "n_encoder_layers", c.model.n_encoder_layers);
        read_field(m, "model", "n_decoder_layers", c.model.n_decoder_layers);
        read_field(m, "model", "rel_pos_buckets", c.model.rel_pos_buckets);
        read_field(m, "model", "rel_pos_max_distance", c.model.rel_pos_max_distance);
        read_field(m, "model", "max_seq_len", c.model.max_seq_len);
        read_field(m, "model", "dropout_rate", c.model.dropout_rate);
    }
    bool explicit_input = false, explicit_target = false;
    if (j.contains("train")) {
        const Json& t = j["train"];
        reject_unknown(t, "train", {"learning_rate", "batch_size", "num_steps", "input_len", "target_len",
                                    "checkpoint_every", "log_every", "family", "length_scale"});
        read_field(t, "train", "learning_rate", c.train.learning_rate);
        read_field(t, "train", "batch_size", c.train.batch_size);
        read_field(t, "train", "num_steps", c.train.num_steps);
        read_field(t, "train", "checkpoint_every", c.train.checkpoint_every);
        read_field(t, "train", "log_every", c.train.log_every);
        read_field(t, "train", "family", c.family);
        read_field(t, "train", "length_scale", c.length_scale);
        explicit_input = t.contains("input_len");
        explicit_target = t.contains("target_len");
        read_field(t, "train", "input_len", c.train.input_len);
        read_field(t, "train", "target_len", c.train.target_len);
    }
    if (!(c.length_scale > 0.0) || !std::isfinite(c.length_scale)) {
        fail(ErrorKind::config, "train.length_scale must be positive");
    }
    const LengthCaps caps = default_lengths(c.family);
    // Family defaults are clipped to the model; explicit lengths are validated instead.
    if (!explicit_input) c.train.input_len = std::min(scaled(caps.input_len, c.length_scale), c.model.max_seq_len);
    if (!explicit_target) c.train.target_len = std::min(scaled(caps.target_len, c.length_scale), c.model.max_seq_len);
    if (j.contains("corruption")) {
        const Json& k = j["corruption"];
        reject_unknown(k, "corruption", {"rate", "mean_span_length", "max_sentinels"});
        read_field(k, "corruption", "rate", c.corruption.corruption_rate);
        read_field(k, "corruption", "mean_span_length", c.corruption.mean_span_length);
        read_field(k, "corruption", "max_sentinels", c.corruption.max_sentinels);
    }
    if (j.contains("pretrain_corpora")) c.pretrain_corpora = read_datasets(j["pretrain_corpora"], "pretrain_corpora", base_dir);
    if (j.contains("mixture")) c.mixture = read_datasets(j["mixture"], "mixture", base_dir);
    std::string path;
    read_field(j, "", "vocab_path", path);
    c.vocab_path = resolve(base_dir, path);
    path.clear();
    read_field(j, "", "out_dir", path);
    c.out_dir = resolve(base_dir, path);
    path.clear();
    read_field(j, "", "init_checkpoint", path);
    c.init_checkpoint = resolve(base_dir, path);

    if (const char* env = std::getenv("T2TBIO_OUT_DIR"); env && *env) c.out_dir = env;
    if (const char* env = std::getenv("T2TBIO_SEED"); env && *env) {
        const std::string_view s(env);
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size()) fail(ErrorKind::config, "T2TBIO_SEED is not an integer");
        c.seed = v;
    }
    c.train.seed = c.seed;
    c.corruption.seed = c.seed;
    c.validate();
    return c;
}

RunConfig load_config(const fs::path& path) {
    return parse_config(read_file(path), path.parent_path());
}

nlohmann::ordered_json config_to_json(const RunConfig& c) {
    auto datasets = [](const std::vector<DatasetSpec>& ds) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& d : ds) arr.push_back({{"name", d.name}, {"path", d.path.generic_string()}, {"weight", d.weight}});
        return arr;
    };
    nlohmann::ordered_json j;
    j["model"] = {{"vocab_size", c.model.vocab_size},
                  {"d_model", c.model.d_model},
                  {"n_heads", c.model.n_heads},
                  {"d_ff", c.model.d_ff},
                  {"n_encoder_layers", c.model.n_encoder_layers},
                  {"n_decoder_layers", c.model.n_decoder_layers},
                  {"rel_pos_buckets", c.model.rel_pos_buckets},
                  {"rel_pos_max_distance", c.model.rel_pos_max_distance},
                  {"max_seq_len", c.model.max_seq_len},
                  {"dropout_rate", c.model.dropout_rate}};
    j["train"] = {{"learning_rate", c.train.learning_rate},
                  {"batch_size", c.train.batch_size},
                  {"num_steps", c.train.num_steps},
                  {"input_len", c.train.input_len},
                  {"target_len", c.train.target_len},
                  {"checkpoint_every", c.train.checkpoint_every},
                  {"log_every", c.train.log_every},
                  {"family", c.family},
                  {"length_scale", c.length_scale}};
    j["corruption"] = {{"rate", c.corruption.corruption_rate},
                       {"mean_span_length", c.corruption.mean_span_length},
                       {"max_sentinels", c.corruption.max_sentinels}};
    j["pretrain_corpora"] = datasets(c.pretrain_corpora);
    j["mixture"] = datasets(c.mixture);
    j["vocab_path"] = c.vocab_path.generic_string();
    j["out_dir"] = c.out_dir.generic_string();
    j["init_checkpoint"] = c.init_checkpoint.generic_string();
    j["seed"] = c.seed;
    return j;
}

}  // namespace t2tbio
