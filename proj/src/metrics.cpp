#include "t2tbio/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <sstream>

#include "t2tbio/error.hpp"

namespace t2tbio {

double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

double harmonic_f1(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

namespace {

void finish(ClassScores& c) {
    c.precision = safe_ratio(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fp));
    c.recall = safe_ratio(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fn));
    c.f1 = harmonic_f1(c.precision, c.recall);
}

void finish_micro(MetricsReport& r) {
    r.precision = safe_ratio(static_cast<double>(r.tp), static_cast<double>(r.tp + r.fp));
    r.recall = safe_ratio(static_cast<double>(r.tp), static_cast<double>(r.tp + r.fn));
    r.f1 = harmonic_f1(r.precision, r.recall);
}

}  // namespace

MetricsReport entity_prf(const std::vector<std::vector<EntitySpan>>& gold,
                         const std::vector<std::vector<EntitySpan>>& pred) {
    if (gold.size() != pred.size()) {
        fail(ErrorKind::data, "alignment error: " + std::to_string(gold.size()) + " gold sentences vs " +
                                  std::to_string(pred.size()) + " predicted");
    }
    MetricsReport r;
    for (std::size_t s = 0; s < gold.size(); ++s) {
        std::vector<EntitySpan> g = gold[s];
        std::vector<EntitySpan> p = pred[s];
        std::sort(g.begin(), g.end());
        std::sort(p.begin(), p.end());
        std::vector<EntitySpan> hit;
        std::set_intersection(g.begin(), g.end(), p.begin(), p.end(), std::back_inserter(hit));
        for (const auto& e : hit) ++r.per_class[e.entity_type].tp;
        // Remaining unmatched elements per side.
        std::vector<EntitySpan> only_g;
        std::vector<EntitySpan> only_p;
        std::set_difference(g.begin(), g.end(), hit.begin(), hit.end(), std::back_inserter(only_g));
        std::set_difference(p.begin(), p.end(), hit.begin(), hit.end(), std::back_inserter(only_p));
        for (const auto& e : only_g) ++r.per_class[e.entity_type].fn;
        for (const auto& e : only_p) ++r.per_class[e.entity_type].fp;
        for (const auto& e : g) ++r.per_class[e.entity_type].support;
    }
    for (auto& [name, c] : r.per_class) {
        finish(c);
        r.tp += c.tp;
        r.fp += c.fp;
        r.fn += c.fn;
    }
    finish_micro(r);
    return r;
}

MetricsReport classification_f1(const std::vector<std::string>& gold, const std::vector<std::string>& pred,
                                const std::vector<std::string>& classes,
                                const std::vector<std::string>& positive_classes) {
    if (gold.size() != pred.size()) fail(ErrorKind::data, "alignment error: gold and predictions differ in length");
    MetricsReport r;
    for (const auto& c : classes) r.per_class[c];
    std::size_t correct = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (gold[i] == pred[i]) {
            ++correct;
            ++r.per_class[gold[i]].tp;
        } else {
            ++r.per_class[gold[i]].fn;
            ++r.per_class[pred[i]].fp;
        }
        ++r.per_class[gold[i]].support;
    }
    for (auto& [name, c] : r.per_class) finish(c);
    for (const auto& c : positive_classes) {
        auto it = r.per_class.find(c);
        if (it == r.per_class.end()) continue;
        r.tp += it->second.tp;
        r.fp += it->second.fp;
        r.fn += it->second.fn;
    }
    finish_micro(r);
    r.accuracy = safe_ratio(static_cast<double>(correct), static_cast<double>(gold.size()));
    return r;
}

double accuracy(const std::vector<std::string>& gold, const std::vector<std::string>& pred) {
    if (gold.size() != pred.size()) fail(ErrorKind::data, "alignment error: gold and predictions differ in length");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) correct += gold[i] == pred[i] ? 1 : 0;
    return safe_ratio(static_cast<double>(correct), static_cast<double>(gold.size()));
}

double sample_average_f1(const std::vector<std::set<std::string>>& gold,
                         const std::vector<std::set<std::string>>& pred) {
    if (gold.size() != pred.size()) fail(ErrorKind::data, "alignment error: gold and predictions differ in length");
    if (gold.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t d = 0; d < gold.size(); ++d) {
        if (gold[d].empty() && pred[d].empty()) {
            total += 1.0;
            continue;
        }
        std::size_t tp = 0;
        for (const auto& l : pred[d]) tp += gold[d].count(l);
        const double p = safe_ratio(static_cast<double>(tp), static_cast<double>(pred[d].size()));
        const double r = safe_ratio(static_cast<double>(tp), static_cast<double>(gold[d].size()));
        total += harmonic_f1(p, r);
    }
    return total / static_cast<double>(gold.size());
}

std::string normalize_answer(std::string_view s) {
    std::string cleaned;
    for (char c : s) {
        const auto u = static_cast<unsigned char>(c);
        if (std::ispunct(u)) continue;
        cleaned += static_cast<char>(std::tolower(u));
    }
    auto words = split_words(cleaned);
    if (!words.empty() && (words.front() == "a" || words.front() == "an" || words.front() == "the")) {
        words.erase(words.begin());
    }
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

double lenient_accuracy(const std::vector<QuestionGroup>& groups) {
    if (groups.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t q = 0; q < groups.size(); ++q) {
        const auto& g = groups[q];
        if (g.predictions.empty()) fail(ErrorKind::data, "no snippets for question " + std::to_string(q));
        if (g.gold_answers.empty()) fail(ErrorKind::data, "no gold answers for question " + std::to_string(q));
        std::set<std::string> gold;
        for (const auto& a : g.gold_answers) gold.insert(normalize_answer(a));
        const bool hit = std::any_of(g.predictions.begin(), g.predictions.end(),
                                     [&gold](const std::string& p) { return gold.count(normalize_answer(p)) > 0; });
        correct += hit ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(groups.size());
}

nlohmann::ordered_json to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["f1"] = r.f1;
    j["accuracy"] = r.accuracy;
    j["lenient_accuracy"] = r.lenient_accuracy;
    j["counts"] = {{"tp", r.tp}, {"fp", r.fp}, {"fn", r.fn}, {"dropped_markers", r.dropped_markers}};
    auto pc = nlohmann::ordered_json::object();
    for (const auto& [name, c] : r.per_class) {
        pc[name] = {{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}};
    }
    j["per_class"] = std::move(pc);
    return j;
}

std::string to_table(const MetricsReport& r) {
    std::ostringstream out;
    char buf[128];
    auto row = [&](const std::string& name, double v) {
        std::snprintf(buf, sizeof buf, "  %-24s %8.4f\n", name.c_str(), v);
        out << buf;
    };
    row("precision", r.precision);
    row("recall", r.recall);
    row("f1", r.f1);
    row("accuracy", r.accuracy);
    row("lenient_accuracy", r.lenient_accuracy);
    for (const auto& [name, c] : r.per_class) {
        std::snprintf(buf, sizeof buf, "  %-24s P=%.4f R=%.4f F1=%.4f n=%zu\n", ("class " + name).c_str(), c.precision,
                      c.recall, c.f1, c.support);
        out << buf;
    }
    return out.str();
}

}  // namespace t2tbio
