#include "t2tbio/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "t2tbio/checkpoint.hpp"
#include "t2tbio/corruption.hpp"
#include "t2tbio/data_io.hpp"
#include "t2tbio/error.hpp"
#include "t2tbio/kernels.hpp"
#include "t2tbio/metrics.hpp"
#include "t2tbio/model.hpp"
#include "t2tbio/task_codec.hpp"
#include "t2tbio/tokenizer.hpp"
#include "t2tbio/trainer.hpp"

namespace t2tbio {
namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct Common {
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
    bool deterministic = false;
    std::string out_dir;
    CLI::Option* out_opt = nullptr;
};

struct VocabTrainArgs {
    Common c;
    std::vector<std::string> corpus;
    std::size_t size = 0;
    std::size_t sentinels = 100;
    std::string output = "vocab.txt";
};

struct CorruptArgs {
    Common c;
    std::string corpus;
    std::string vocab;
    double rate = 0.15;
    double mean_span = 3.0;
    std::size_t max_sentinels = 100;
    std::size_t window = 512;
    std::string output = "shard.tsv";
};

struct EncodeArgs {
    Common c;
    std::string format;
    std::string input;
    std::string task;
    std::string kind = "re";
    std::vector<std::string> columns;
    bool header = false;
    std::vector<std::string> labels;
    std::string negative = "false";
    std::string entity_type;
    std::string output;
};

struct TrainArgs {
    Common c;
    std::string config;
    std::string resume;
    std::string init;
};

struct PredictArgs {
    Common c;
    std::string checkpoint;
    std::string input;
    std::string vocab;
    std::size_t max_len = 0;
    std::size_t input_len = 0;
    std::string output = "predictions.jsonl";
};

struct EvaluateArgs {
    Common c;
    std::string predictions;
    std::string gold;
    std::vector<std::string> floors;
    std::string output = "report.json";
};

struct InspectArgs {
    Common c;
    std::string checkpoint;
};

struct Args {
    VocabTrainArgs vocab_train;
    CorruptArgs corrupt;
    EncodeArgs encode;
    TrainArgs pretrain;
    TrainArgs finetune;
    PredictArgs predict;
    EvaluateArgs evaluate;
    InspectArgs inspect;
};

void add_common(CLI::App* sub, Common& c) {
    c.seed_opt = sub->add_option("--seed", c.seed, "Seed for every random choice the command makes");
    sub->add_flag("--deterministic", c.deterministic, "Single-threaded, bit-reproducible execution");
    c.out_opt = sub->add_option("--out-dir", c.out_dir, "Directory that receives every artifact written");
}

std::unique_ptr<CLI::App> build_app(Args& a) {
    auto app = std::make_unique<CLI::App>("Text-to-text pipeline for biomedical language tasks", "t2tbio");
    app->require_subcommand(1);

    auto* vt = app->add_subcommand("vocab-train", "Train a subword vocabulary from line-per-document corpora");
    add_common(vt, a.vocab_train.c);
    vt->add_option("--corpus", a.vocab_train.corpus, "Corpus text files, one document per line")->required();
    vt->add_option("--size", a.vocab_train.size, "Target vocabulary size including reserved pieces")->required();
    vt->add_option("--sentinels", a.vocab_train.sentinels, "Number of sentinel pieces to reserve");
    vt->add_option("--output", a.vocab_train.output, "Vocabulary file name inside the output directory");

    auto* co = app->add_subcommand("corrupt", "Write span-corrupted input/target pairs for a corpus");
    add_common(co, a.corrupt.c);
    co->add_option("--corpus", a.corrupt.corpus, "Corpus text file, one document per line")->required();
    co->add_option("--vocab", a.corrupt.vocab, "Vocabulary file")->required();
    co->add_option("--rate", a.corrupt.rate, "Fraction of tokens to mask");
    co->add_option("--mean-span", a.corrupt.mean_span, "Mean masked span length");
    co->add_option("--max-sentinels", a.corrupt.max_sentinels, "Upper bound on sentinels per example");
    co->add_option("--window", a.corrupt.window, "Window length in tokens");
    co->add_option("--output", a.corrupt.output, "Shard file name inside the output directory");

    auto* en = app->add_subcommand("encode-task", "Convert a raw dataset to task-example JSONL");
    add_common(en, a.encode.c);
    en->add_option("--format", a.encode.format, "Input format")
        ->required()
        ->check(CLI::IsMember({"conll", "tsv", "qa", "copy"}));
    en->add_option("--input", a.encode.input, "Raw dataset file")->required();
    en->add_option("--task", a.encode.task, "Task name, also used as the input prefix")->required();
    en->add_option("--kind", a.encode.kind, "Label task kind for tsv input")
        ->check(CLI::IsMember({"re", "nli", "doc"}));
    en->add_option("--columns", a.encode.columns, "Tsv column names in file order")->delimiter(',');
    en->add_flag("--header", a.encode.header, "Tsv input starts with a header line");
    en->add_option("--labels", a.encode.labels, "Closed label set for re (default: labels seen in the file)")
        ->delimiter(',');
    en->add_option("--negative", a.encode.negative, "Negative class excluded from micro F1 (re)");
    en->add_option("--entity-type", a.encode.entity_type, "Entity type to keep from conll input");
    en->add_option("--output", a.encode.output, "Output file name inside the output directory (default <task>.jsonl)");

    for (auto [name, args, desc] : {std::tuple{"pretrain", &a.pretrain, "Span-corruption pretraining from a run config"},
                                    std::tuple{"finetune", &a.finetune, "Multi-task fine-tuning from a run config"}}) {
        auto* tr = app->add_subcommand(name, desc);
        add_common(tr, args->c);
        tr->add_option("--config", args->config, "Run config JSON file")->required();
        tr->add_option("--resume", args->resume, "Checkpoint directory to continue from, optimizer state included");
        tr->add_option("--init", args->init, "Checkpoint directory whose weights start the run");
    }

    auto* pr = app->add_subcommand("predict", "Greedy generation for task-example JSONL");
    add_common(pr, a.predict.c);
    pr->add_option("--checkpoint", a.predict.checkpoint, "Checkpoint directory")->required();
    pr->add_option("--input", a.predict.input, "Task-example JSONL file")->required();
    pr->add_option("--vocab", a.predict.vocab, "Vocabulary file (default: the one stored in the checkpoint)");
    pr->add_option("--max-len", a.predict.max_len, "Maximum generated tokens (default: training target length)");
    pr->add_option("--input-len", a.predict.input_len, "Input truncation length (default: training input length)");
    pr->add_option("--output", a.predict.output, "Predictions file name inside the output directory");

    auto* ev = app->add_subcommand("evaluate", "Score predictions against gold task examples");
    add_common(ev, a.evaluate.c);
    ev->add_option("--predictions", a.evaluate.predictions, "Predictions JSONL from predict")->required();
    ev->add_option("--gold", a.evaluate.gold, "Task-example JSONL with gold annotations")->required();
    ev->add_option("--floor", a.evaluate.floors, "Minimum score as task.metric=value; exit 3 when missed");
    ev->add_option("--output", a.evaluate.output, "Report file name inside the output directory");

    auto* in = app->add_subcommand("inspect-checkpoint", "Print a checkpoint summary as JSON");
    add_common(in, a.inspect.c);
    in->add_option("--checkpoint", a.inspect.checkpoint, "Checkpoint directory")->required();
    return app;
}

fs::path out_dir(const Common& c) {
    return c.out_dir.empty() ? fs::path(".") : fs::path(c.out_dir);
}

std::string dump(const ojson& j) {
    return j.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t s = seed ^ (stream * 0xD1B54A32D192ED03ULL);
    return splitmix64(s);
}

// ---- vocab-train ----

int cmd_vocab_train(const VocabTrainArgs& a, std::ostream& err) {
    std::vector<std::string> docs;
    for (const auto& path : a.corpus) {
        auto lines = read_lines(path);
        docs.insert(docs.end(), lines.begin(), lines.end());
    }
    const Vocabulary v = train_vocab(docs, a.size, a.sentinels);
    const fs::path out = out_dir(a.c) / a.output;
    write_file(out, v.serialize());
    err << "vocab-train: " << v.size() << " pieces (" << v.num_learned() << " learned, " << v.num_sentinels()
        << " sentinels) from " << docs.size() << " documents\n";
    if (v.size() < a.size) err << "warning: no pair occurs twice any more; vocabulary stopped below --size\n";
    return kExitOk;
}

// ---- corrupt ----

int cmd_corrupt(const CorruptArgs& a, std::ostream& err) {
    const Vocabulary v = Vocabulary::load(a.vocab);
    SpanCorruptionConfig cfg;
    cfg.corruption_rate = a.rate;
    cfg.mean_span_length = a.mean_span;
    cfg.max_sentinels = a.max_sentinels;
    cfg.seed = a.c.seed;
    cfg.validate();
    if (a.window == 0) fail(ErrorKind::usage, "--window must be positive");

    CorpusSource src{fs::path(a.corpus).stem().string(), {}, 1.0};
    for (const auto& line : read_lines(a.corpus)) src.documents.push_back(encode(v, line));
    TrainConfig tc;
    tc.input_len = a.window;
    tc.target_len = std::numeric_limits<std::size_t>::max();
    const auto pairs = pretraining_pairs(src, 0, cfg, tc, v);
    std::vector<CorruptionExample> records;
    records.reserve(pairs.size());
    for (const auto& p : pairs) records.push_back({p.input, p.target});
    const fs::path out = out_dir(a.c) / a.output;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_shard(out, records, cfg);
    err << "corrupt: " << records.size() << " windows from " << src.documents.size() << " documents\n";
    return kExitOk;
}

// ---- encode-task ----

std::vector<std::string> default_columns(std::string_view kind) {
    if (kind == "nli") return {"premise", "hypothesis", "label"};
    if (kind == "doc") return {"text", "labels"};
    return {"sentence", "label"};
}

const std::string& column(const TsvRecord& r, const std::string& name) {
    auto it = r.find(name);
    if (it == r.end()) fail(ErrorKind::usage, "--columns must include '" + name + "'");
    return it->second;
}

void print_warnings(const ReadReport& rep, std::ostream& err) {
    for (const auto& m : rep.messages) err << "warning: " << m << '\n';
}

int cmd_encode(const EncodeArgs& a, std::ostream& err) {
    std::vector<TaskExample> out;
    ReadReport rep;
    if (a.format == "conll") {
        const auto sentences = read_conll_ner(a.input, &rep);
        std::set<std::string> types;
        for (const auto& s : sentences)
            for (const auto& sp : s.spans) types.insert(sp.entity_type);
        std::string type = a.entity_type;
        if (type.empty()) {
            if (types.size() > 1) fail(ErrorKind::usage, "input has several entity types; pick one with --entity-type");
            if (!types.empty()) type = *types.begin();
        }
        for (const auto& s : sentences) {
            std::vector<EntitySpan> kept;
            for (const auto& sp : s.spans)
                if (sp.entity_type == type) kept.push_back(sp);
            auto ex = encode_ner(s.words, kept, a.task);
            std::get<NerGold>(ex.gold).entity_type = type;
            out.push_back(std::move(ex));
        }
    } else if (a.format == "tsv") {
        TsvSchema schema{a.columns.empty() ? default_columns(a.kind) : a.columns, a.header};
        const auto records = read_tsv_pairs(a.input, schema);
        if (a.kind == "re") {
            std::vector<std::string> labels = a.labels;
            if (labels.empty()) {
                std::set<std::string> seen;
                for (const auto& r : records) seen.insert(column(r, "label"));
                labels.assign(seen.begin(), seen.end());
            }
            for (const auto& r : records) {
                out.push_back(encode_re(column(r, "sentence"), column(r, "label"), a.task, labels, a.negative));
            }
        } else if (a.kind == "nli") {
            for (const auto& r : records) {
                out.push_back(encode_nli(column(r, "premise"), column(r, "hypothesis"), column(r, "label")));
            }
        } else {
            for (const auto& r : records) {
                out.push_back(encode_doc(column(r, "text"), parse_doc_labels(column(r, "labels")), a.task));
            }
        }
    } else if (a.format == "qa") {
        for (const auto& q : read_qa_json(a.input, &rep)) {
            for (std::size_t i = 0; i < q.snippets.size(); ++i) out.push_back(encode_qa(q, i, a.task));
        }
    } else {
        for (const auto& line : read_lines(a.input)) out.push_back(encode_copy(trim(line), a.task));
    }
    print_warnings(rep, err);
    const fs::path path = out_dir(a.c) / (a.output.empty() ? a.task + ".jsonl" : a.output);
    write_task_examples(path, out);
    err << "encode-task: " << out.size() << " examples\n";
    return kExitOk;
}

// ---- pretrain / finetune ----

struct PreparedRun {
    RunConfig cfg;
    Vocabulary vocab;
    TrainState state;
    fs::path out;
};

PreparedRun prepare_run(const TrainArgs& a, std::ostream& err) {
    PreparedRun r;
    r.cfg = load_config(a.config);
    RunConfig& cfg = r.cfg;
    if (a.c.seed_opt->count() > 0) {
        cfg.seed = a.c.seed;
        cfg.train.seed = a.c.seed;
        cfg.corruption.seed = a.c.seed;
    }
    if (a.c.out_opt->count() > 0) cfg.out_dir = a.c.out_dir;
    r.out = cfg.out_dir.empty() ? fs::path(".") : cfg.out_dir;
    if (cfg.vocab_path.empty()) fail(ErrorKind::config, "vocab_path is required");
    r.vocab = Vocabulary::load(cfg.vocab_path);
    if (cfg.model.vocab_size == 0) cfg.model.vocab_size = r.vocab.size();
    if (cfg.model.vocab_size != r.vocab.size()) {
        fail(ErrorKind::config, "model.vocab_size (" + std::to_string(cfg.model.vocab_size) +
                                    ") does not match the vocabulary (" + std::to_string(r.vocab.size()) + ")");
    }
    cfg.validate();

    const std::string init = a.init.empty() ? cfg.init_checkpoint.string() : a.init;
    if (!a.resume.empty()) {
        auto ck = load_checkpoint(a.resume);
        if (!(ck.config == cfg.model)) fail(ErrorKind::config, "checkpoint model config differs from the run config");
        r.state = std::move(ck.state);
        err << "resuming from step " << r.state.step << '\n';
    } else if (!init.empty()) {
        ModelConfig ck_cfg;
        auto params = load_params<float>(init, &ck_cfg);
        if (!(ck_cfg == cfg.model)) fail(ErrorKind::config, "init checkpoint model config differs from the run config");
        r.state = TrainState::fresh(std::move(params), derive_seed(cfg.seed, 1));
    } else {
        r.state = TrainState::fresh(init_params<float>(cfg.model, derive_seed(cfg.seed, 0)), derive_seed(cfg.seed, 1));
    }
    return r;
}

ojson run_meta(const PreparedRun& r, std::string_view phase, bool deterministic) {
    return {{"phase", phase},
            {"seed", r.cfg.seed},
            {"deterministic", deterministic},
            {"input_len", r.cfg.train.input_len},
            {"target_len", r.cfg.train.target_len},
            {"learning_rate", r.cfg.train.learning_rate},
            {"batch_size", r.cfg.train.batch_size},
            {"kernels", kernels::backend_name(kernels::active_backend())}};
}

void save_with_vocab(const fs::path& dir, const PreparedRun& r, const TrainState& s, const ojson& meta) {
    save_checkpoint(dir, r.cfg.model, s, meta);
    write_file(dir / "vocab.txt", r.vocab.serialize());
}

void write_curve(const fs::path& path, const std::vector<LossPoint>& curve) {
    std::string buf = "step\ttask\tloss\n";
    char num[64];
    for (const auto& p : curve) {
        std::snprintf(num, sizeof num, "%.9g", p.loss);
        buf += std::to_string(p.step) + '\t' + p.task + '\t' + num + '\n';
    }
    write_file(path, buf);
}

TrainHooks make_hooks(const PreparedRun& r, const ojson& meta, std::ostream& err) {
    TrainHooks hooks;
    hooks.log = &err;
    const std::size_t every = r.cfg.train.checkpoint_every;
    if (every > 0) {
        hooks.on_checkpoint = [&r, meta, every](const TrainState& s) {
            if (s.step % every == 0) save_with_vocab(r.out / "checkpoints" / ("step-" + std::to_string(s.step)), r, s, meta);
        };
    }
    return hooks;
}

int cmd_pretrain(const TrainArgs& a, std::ostream& err) {
    PreparedRun r = prepare_run(a, err);
    if (r.cfg.pretrain_corpora.empty()) fail(ErrorKind::config, "pretrain_corpora is empty");
    // Read and tokenise everything before the first step.
    std::vector<CorpusSource> corpora;
    for (const auto& spec : r.cfg.pretrain_corpora) {
        CorpusSource src{spec.name, {}, spec.weight};
        for (const auto& line : read_lines(spec.path)) src.documents.push_back(encode(r.vocab, line));
        corpora.push_back(std::move(src));
    }
    const ojson meta = run_meta(r, "pretrain", a.c.deterministic);
    const auto result = pretrain(r.state, r.cfg.model, corpora, r.cfg.corruption, r.cfg.train, r.vocab,
                                 make_hooks(r, meta, err));
    save_with_vocab(r.out / "checkpoint", r, r.state, meta);
    write_curve(r.out / "loss_curve.tsv", result.curve);
    err << "pretrain: " << result.windows << " windows, " << result.dropped_windows << " dropped\n";
    return kExitOk;
}

int cmd_finetune(const TrainArgs& a, std::ostream& err) {
    PreparedRun r = prepare_run(a, err);
    if (r.cfg.mixture.empty()) fail(ErrorKind::config, "empty mixture");
    std::vector<TaskDataset> mixture;
    for (const auto& spec : r.cfg.mixture) {
        mixture.push_back({spec.name, read_task_examples(spec.path), spec.weight});
    }
    const ojson meta = run_meta(r, "finetune", a.c.deterministic);
    const auto result = finetune(r.state, r.cfg.model, mixture, r.cfg.train, r.vocab, make_hooks(r, meta, err));
    save_with_vocab(r.out / "checkpoint", r, r.state, meta);
    write_curve(r.out / "loss_curve.tsv", result.curve);
    for (std::size_t i = 0; i < mixture.size(); ++i) {
        err << "finetune: task " << mixture[i].name << " drawn " << result.task_draws[i] << " times\n";
    }
    return kExitOk;
}

// ---- predict ----

int cmd_predict(const PredictArgs& a, std::ostream& err) {
    auto ck = load_checkpoint(a.checkpoint);
    const Vocabulary v = Vocabulary::load(a.vocab.empty() ? fs::path(a.checkpoint) / "vocab.txt" : fs::path(a.vocab));
    if (v.size() != ck.config.vocab_size) fail(ErrorKind::config, "vocabulary does not match the checkpoint");
    const auto& meta = ck.manifest.contains("meta") ? ck.manifest["meta"] : nlohmann::json::object();
    std::size_t input_len = a.input_len ? a.input_len : meta.value("input_len", ck.config.max_seq_len);
    std::size_t max_len = a.max_len ? a.max_len : meta.value("target_len", ck.config.max_seq_len);
    input_len = std::min(input_len, ck.config.max_seq_len);
    max_len = std::min(max_len, ck.config.max_seq_len);

    const auto examples = read_task_examples(a.input);
    std::string buf;
    for (const auto& ex : examples) {
        ojson line;
        line["task"] = ex.task_name;
        line["input"] = ex.input_text;
        line["prediction"] = generate(ck.state.params, ck.config, v, ex.input_text, input_len, max_len);
        buf += line.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + '\n';
    }
    write_file(out_dir(a.c) / a.output, buf);
    err << "predict: " << examples.size() << " examples\n";
    return kExitOk;
}

// ---- evaluate ----

struct TaskScore {
    std::string kind;
    std::size_t examples = 0;
    ojson metrics = ojson::object();
    ojson detail;
};

std::string input_body(const TaskExample& ex) {
    const std::string prefix = task_prefix(ex.task_name);
    std::string_view s = ex.input_text;
    if (s.substr(0, prefix.size()) == prefix) s.remove_prefix(prefix.size());
    return std::string(s);
}

TaskScore score_task(const std::vector<const TaskExample*>& gold, const std::vector<std::string>& pred) {
    TaskScore t;
    t.examples = gold.size();
    const Gold& first = gold.front()->gold;
    for (const auto* g : gold) {
        if (g->gold.index() != first.index()) fail(ErrorKind::data, "task " + g->task_name + " mixes gold kinds");
    }
    if (std::holds_alternative<NerGold>(first)) {
        t.kind = "ner";
        std::string type;
        for (const auto* g : gold)
            if (type.empty()) type = std::get<NerGold>(g->gold).entity_type;
        std::vector<std::vector<EntitySpan>> gs, ps;
        std::size_t dropped = 0;
        for (std::size_t i = 0; i < gold.size(); ++i) {
            auto spans = std::get<NerGold>(gold[i]->gold).spans;
            for (auto& s : spans) s.entity_type = type;
            gs.push_back(std::move(spans));
            auto d = decode_ner(pred[i], split_words(input_body(*gold[i])), type);
            dropped += d.dropped_markers;
            ps.push_back(std::move(d.spans));
        }
        auto rep = entity_prf(gs, ps);
        rep.dropped_markers = dropped;
        t.metrics = {{"precision", rep.precision}, {"recall", rep.recall}, {"f1", rep.f1}};
        t.detail = to_json(rep);
    } else if (std::holds_alternative<LabelGold>(first)) {
        t.kind = "label";
        const auto& g0 = std::get<LabelGold>(first);
        std::vector<std::string> gl, pl, positives;
        for (const auto& c : g0.label_set)
            if (c != g0.negative_label) positives.push_back(c);
        std::size_t fallbacks = 0;
        for (std::size_t i = 0; i < gold.size(); ++i) {
            gl.push_back(std::get<LabelGold>(gold[i]->gold).label);
            auto d = decode_label(pred[i], g0.label_set);
            if (!d.exact) ++fallbacks;
            pl.push_back(d.label);
        }
        auto rep = classification_f1(gl, pl, g0.label_set, positives);
        t.metrics = {{"precision", rep.precision}, {"recall", rep.recall}, {"f1", rep.f1}, {"accuracy", rep.accuracy}};
        t.detail = to_json(rep);
        t.detail["inexact_label_decodes"] = fallbacks;
    } else if (std::holds_alternative<LabelSetGold>(first)) {
        t.kind = "labels";
        std::vector<std::set<std::string>> gs, ps;
        for (std::size_t i = 0; i < gold.size(); ++i) {
            const auto& l = std::get<LabelSetGold>(gold[i]->gold).labels;
            gs.emplace_back(l.begin(), l.end());
            ps.push_back(parse_doc_labels(pred[i]));
        }
        t.metrics = {{"sample_f1", sample_average_f1(gs, ps)}};
    } else if (std::holds_alternative<AnswerGold>(first)) {
        t.kind = "qa";
        std::vector<QuestionGroup> groups;
        std::map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < gold.size(); ++i) {
            const auto& g = std::get<AnswerGold>(gold[i]->gold);
            auto [it, fresh] = index.emplace(g.question_id, groups.size());
            if (fresh) groups.push_back({{}, g.answers});
            groups[it->second].predictions.push_back(pred[i]);
        }
        t.metrics = {{"lenient_accuracy", lenient_accuracy(groups)}};
        t.detail = {{"questions", groups.size()}, {"note", kLenientHeader}};
    } else {
        t.kind = "text";
        std::vector<std::string> gl;
        for (const auto* g : gold) gl.push_back(std::get<TextGold>(g->gold).text);
        std::vector<std::string> pl;
        for (const auto& p : pred) pl.push_back(trim(p));
        t.metrics = {{"exact_match", accuracy(gl, pl)}};
    }
    return t;
}

std::string score_table(const std::map<std::string, TaskScore>& scores) {
    std::vector<std::array<std::string, 3>> rows{{"task", "metric", "value"}};
    for (const auto& [task, s] : scores) {
        for (const auto& [metric, value] : s.metrics.items()) {
            char num[32];
            std::snprintf(num, sizeof num, "%.4f", value.get<double>());
            rows.push_back({task, metric, num});
        }
    }
    std::array<std::size_t, 3> width{};
    for (const auto& r : rows)
        for (std::size_t c = 0; c < 3; ++c) width[c] = std::max(width[c], r[c].size());
    std::string out;
    for (const auto& r : rows) {
        out += r[0] + std::string(width[0] - r[0].size() + 2, ' ');
        out += r[1] + std::string(width[1] - r[1].size() + 2, ' ');
        out += std::string(width[2] - r[2].size(), ' ') + r[2] + '\n';
    }
    return out;
}

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out, std::ostream& err) {
    const auto gold = read_task_examples(a.gold);
    std::vector<ojson> preds;
    {
        std::size_t lineno = 0;
        std::istringstream in(read_file(a.predictions));
        for (std::string line; std::getline(in, line);) {
            ++lineno;
            if (trim(line).empty()) continue;
            try {
                auto j = ojson::parse(line);
                if (!j.is_object() || !j.contains("prediction") || !j["prediction"].is_string()) {
                    fail(ErrorKind::data, "missing string \"prediction\"");
                }
                preds.push_back(std::move(j));
            } catch (const std::exception& e) {
                fail(ErrorKind::data, a.predictions + ": line " + std::to_string(lineno) + ": " + e.what());
            }
        }
    }
    if (preds.size() != gold.size()) {
        fail(ErrorKind::data, "predictions (" + std::to_string(preds.size()) + ") and gold (" +
                                  std::to_string(gold.size()) + ") differ in length");
    }
    std::map<std::string, std::vector<const TaskExample*>> by_task;
    std::map<std::string, std::vector<std::string>> pred_by_task;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (preds[i].contains("task") && preds[i]["task"] != gold[i].task_name) {
            fail(ErrorKind::data, "prediction " + std::to_string(i + 1) + " is for task " +
                                      preds[i]["task"].dump() + ", gold is " + gold[i].task_name);
        }
        by_task[gold[i].task_name].push_back(&gold[i]);
        pred_by_task[gold[i].task_name].push_back(preds[i]["prediction"].get<std::string>());
    }
    std::map<std::string, TaskScore> scores;
    for (const auto& [task, g] : by_task) scores[task] = score_task(g, pred_by_task[task]);

    ojson report;
    report["tasks"] = ojson::object();
    bool has_qa = false;
    for (const auto& [task, s] : scores) {
        ojson t{{"kind", s.kind}, {"examples", s.examples}, {"metrics", s.metrics}};
        if (!s.detail.is_null()) t["detail"] = s.detail;
        report["tasks"][task] = std::move(t);
        has_qa = has_qa || s.kind == "qa";
    }
    if (has_qa) report["notes"] = ojson::array({kLenientHeader});

    int code = kExitOk;
    ojson floor_results = ojson::array();
    for (const auto& f : a.floors) {
        const auto eq = f.find('=');
        const auto dot = f.substr(0, eq).rfind('.');
        if (eq == std::string::npos || dot == std::string::npos) {
            fail(ErrorKind::usage, "--floor expects task.metric=value, got '" + f + "'");
        }
        const std::string task = f.substr(0, dot), metric = f.substr(dot + 1, eq - dot - 1);
        double floor = 0.0;
        try {
            std::size_t used = 0;
            floor = std::stod(f.substr(eq + 1), &used);
            if (used != f.size() - eq - 1) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            fail(ErrorKind::usage, "--floor value is not a number: '" + f + "'");
        }
        auto it = scores.find(task);
        if (it == scores.end() || !it->second.metrics.contains(metric)) {
            fail(ErrorKind::usage, "--floor names an unknown task or metric: " + task + "." + metric);
        }
        const double value = it->second.metrics[metric].get<double>();
        const bool ok = value >= floor;
        floor_results.push_back({{"task", task}, {"metric", metric}, {"floor", floor}, {"value", value}, {"ok", ok}});
        if (!ok) {
            err << "below floor: " << task << "." << metric << " = " << value << " < " << floor << '\n';
            code = kExitBelowFloor;
        }
    }
    if (!a.floors.empty()) report["floors"] = std::move(floor_results);

    const std::string table = score_table(scores);
    const fs::path json_path = out_dir(a.c) / a.output;
    write_file(json_path, dump(report));
    fs::path txt_path = json_path;
    txt_path.replace_extension(".txt");
    write_file(txt_path, has_qa ? std::string(kLenientHeader) + "\n" + table : table);
    out << table;
    return code;
}

// ---- inspect-checkpoint ----

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
    auto ck = load_checkpoint(a.checkpoint);
    ojson j;
    j["format"] = ck.manifest["format"];
    j["dtype"] = ck.manifest["dtype"];
    j["step"] = ck.state.step;
    j["optimizer"] = ck.manifest["optimizer"];
    j["config"] = model_config_to_json(ck.config);
    j["parameter_count"] = parameter_count(ck.config);
    auto tensors = ojson::array();
    for (const auto& t : ck.state.params.layout()) {
        const auto vals = ck.state.params.tensor(t.name);
        double ss = 0.0;
        for (float x : vals) ss += double(x) * double(x);
        tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"rms", std::sqrt(ss / double(vals.size()))}});
    }
    j["tensors"] = std::move(tensors);
    if (ck.manifest.contains("meta")) j["meta"] = ck.manifest["meta"];
    out << dump(j);
    return kExitOk;
}

int exit_code(ErrorKind k) {
    return k == ErrorKind::usage ? kExitUsage : kExitDataError;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Args a;
    auto app = build_app(a);
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app->parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app->exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }
    try {
        if (app->got_subcommand("vocab-train")) return cmd_vocab_train(a.vocab_train, err);
        if (app->got_subcommand("corrupt")) return cmd_corrupt(a.corrupt, err);
        if (app->got_subcommand("encode-task")) return cmd_encode(a.encode, err);
        if (app->got_subcommand("pretrain")) return cmd_pretrain(a.pretrain, err);
        if (app->got_subcommand("finetune")) return cmd_finetune(a.finetune, err);
        if (app->got_subcommand("predict")) return cmd_predict(a.predict, err);
        if (app->got_subcommand("evaluate")) return cmd_evaluate(a.evaluate, out, err);
        if (app->got_subcommand("inspect-checkpoint")) return cmd_inspect(a.inspect, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kExitDataError;
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitDataError;
    }
    return kExitUsage;
}

std::vector<CommandDoc> command_docs() {
    Args a;
    auto app = build_app(a);
    std::vector<CommandDoc> docs;
    for (const auto* sub : app->get_subcommands({})) {
        CommandDoc d;
        d.name = sub->get_name();
        d.help = sub->help();
        for (const auto* opt : sub->get_options()) {
            if (opt->get_lnames().empty()) continue;
            d.flags.emplace_back("--" + opt->get_lnames().front(), opt->get_description());
        }
        docs.push_back(std::move(d));
    }
    return docs;
}

}  // namespace t2tbio
