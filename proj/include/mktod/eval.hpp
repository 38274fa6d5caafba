#pragma once

#include <map>
#include <string>
#include <vector>

#include "mktod/dialogue.hpp"
#include "mktod/kb.hpp"

// Generation and retrieval metrics: corpus BLEU-4, micro-averaged Entity F1
// over knowledge-base values, and Recall@K over gold entity ids.
namespace mktod::eval {

// Corpus-level BLEU-4: uniform weights, modified n-gram precision with
// counts aggregated over the whole corpus, standard brevity penalty, no
// smoothing (any empty n-gram overlap zeroes the score). Fraction in [0,1].
double bleu(const std::vector<std::vector<std::string>>& candidates,
            const std::vector<std::vector<std::string>>& references);

struct EntityScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    long tp = 0;
    long fp = 0;
    long fn = 0;
};

// Micro-averaged value matching: the predicted set per turn is every distinct
// knowledge-base value mentioned in the response; true/false positives and
// false negatives are summed over all turns before computing P/R/F1.
EntityScore entity_f1(const std::vector<std::string>& responses,
                      const std::vector<std::vector<std::string>>& gold_value_sets,
                      const kb::KnowledgeBase& kb);

// Fraction of turns whose gold entity set is contained in the first K
// retrieved ids. Turns with no gold entities are excluded from the
// denominator; an all-excluded corpus scores 0.
double recall_at_k(const std::vector<std::vector<std::string>>& retrieved_ids,
                   const std::vector<std::vector<std::string>>& gold_entity_ids, int k);

// Values of the turn's gold entities that appear verbatim in the reference
// response; the gold set for entity_f1 when the dataset carries no explicit
// value annotation.
std::vector<std::string> gold_values_for_turn(const dialogue::Turn& turn,
                                              const kb::KnowledgeBase& kb);

struct TurnBreakdown {
    std::string dialogue_id;
    int turn_index = 0;
    std::vector<std::string> predicted_values;
    std::vector<std::string> gold_values;
    long tp = 0;
    long fp = 0;
    long fn = 0;
    bool has_gold_entities = false;
    bool retrieval_hit = false;
};

struct MetricReport {
    double bleu = 0.0;
    EntityScore entity;
    std::map<int, double> recall_at_k;
    std::vector<TurnBreakdown> turns;
};

// Bundles the three metrics over aligned per-turn outputs. references /
// gold_value_sets / retrieved_ids / gold_entity_ids must all have the same
// length as responses; ks lists the requested recall cutoffs.
MetricReport evaluate_outputs(const std::vector<std::string>& responses,
                              const std::vector<std::string>& references,
                              const std::vector<std::vector<std::string>>& gold_value_sets,
                              const std::vector<std::vector<std::string>>& retrieved_ids,
                              const std::vector<std::vector<std::string>>& gold_entity_ids,
                              const kb::KnowledgeBase& kb, const std::vector<int>& ks);

}  // namespace mktod::eval
