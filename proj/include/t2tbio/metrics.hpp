#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "t2tbio/task_codec.hpp"

namespace t2tbio {

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;  // gold count
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
};

// Zero denominators give 0; F1 is 0 whenever P + R is 0.
struct MetricsReport {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double accuracy = 0.0;
    double lenient_accuracy = 0.0;
    std::map<std::string, ClassScores> per_class;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    std::size_t dropped_markers = 0;
};

double safe_ratio(double num, double den);
double harmonic_f1(double p, double r);

// Micro-averaged entity-level P/R/F1; a prediction counts only when start, end
// and type all match a gold span in the same sentence.
MetricsReport entity_prf(const std::vector<std::vector<EntitySpan>>& gold,
                         const std::vector<std::vector<EntitySpan>>& pred);

// Per-class scores for every class in `classes`, plus micro P/R/F1 summed over
// `positive_classes` only. accuracy is filled as well.
MetricsReport classification_f1(const std::vector<std::string>& gold, const std::vector<std::string>& pred,
                                const std::vector<std::string>& classes,
                                const std::vector<std::string>& positive_classes);

double accuracy(const std::vector<std::string>& gold, const std::vector<std::string>& pred);

// Mean of per-document label-set F1; a document with both sets empty scores 1.
double sample_average_f1(const std::vector<std::set<std::string>>& gold,
                         const std::vector<std::set<std::string>>& pred);

struct QuestionGroup {
    std::vector<std::string> predictions;  // one per snippet
    std::vector<std::string> gold_answers;
};

// Lowercase, strip ASCII punctuation, collapse whitespace, drop one leading article.
std::string normalize_answer(std::string_view s);

// A question counts as correct when any snippet prediction matches any gold answer
// after normalisation.
double lenient_accuracy(const std::vector<QuestionGroup>& groups);

inline constexpr std::string_view kLenientHeader =
    "lenient accuracy uses normalized exact string match (lowercase, no punctuation, collapsed "
    "whitespace, leading article dropped); it is not an expert assessment";

nlohmann::ordered_json to_json(const MetricsReport& r);
// Aligned two-column table.
std::string to_table(const MetricsReport& r);

}  // namespace t2tbio
