#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mktod/training.hpp"

// Misalignment study: how well retrieval quality predicts response quality
// across a zoo of retrievers, plus usage statistics of which retrieved
// entities actually surface in generated responses.
namespace mktod::analysis {

// Sample Pearson correlation, clamped to [-1, 1]; needs equal lengths >= 2
// and nonzero variance on both sides.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

struct AlignmentRow {
    std::string generator_name;
    std::string retriever_name;
    double recall_at_k = 0.0;
    double entity_f1 = 0.0;
    double bleu = 0.0;
};

struct NamedRetriever {
    std::string name;
    train::RetrieveFn fn;
};

struct NamedGenerator {
    std::string name;
    const gen::Generator* generator = nullptr;
    metaknow::RenderMode mode = metaknow::RenderMode::kNone;
};

struct StudyResult {
    std::vector<AlignmentRow> rows;  // generator-major, zoo order within
    // Recall@K vs Entity F1 across the zoo, per generator name; unset when
    // either metric has fewer than two distinct values.
    std::map<std::string, std::optional<double>> correlation;
};

// The five reference retrieval strategies: bm25, frequency,
// pretrained-dense, jointly-trained-dense, oracle. The returned callbacks
// hold references to every argument; keep them alive while the zoo is used.
std::vector<NamedRetriever> standard_zoo(const retriever::Bm25Index& bm25,
                                         const retriever::DualEncoder& pretrained,
                                         const retriever::EntityIndex& pretrained_index,
                                         const retriever::DualEncoder& joint,
                                         const retriever::EntityIndex& joint_index,
                                         const kb::KnowledgeBase& kb, int k);

// Runs every (retriever, generator) cell over the dialogues and correlates
// Recall@K with Entity F1 across the zoo for each generator. Requires at
// least 3 retrievers, 1 generator, and distinct generator names.
StudyResult misalignment_study(const std::vector<NamedRetriever>& zoo,
                               const std::vector<NamedGenerator>& generators,
                               const std::vector<const dialogue::Dialogue*>& dialogues,
                               const kb::KnowledgeBase& kb, metaknow::Thresholds thresholds,
                               int k);

// generator,retriever,recall_at_k,entity_f1,bleu
void write_alignment_csv(std::ostream& os, const std::vector<AlignmentRow>& rows);

struct BehaviorStats {
    int total_turns = 0;
    // Turns whose response mentions at least one retrieved entity's name.
    int eligible_turns = 0;
    std::vector<double> rank_usage;  // index r-1: used fraction at rank r
    std::vector<int> rank_eligible;  // retrieved entities seen at rank r
    std::vector<double> confidence_usage;  // indexed by metaknow::Confidence
    std::vector<int> confidence_eligible;
};

// An entity counts as used when its name value appears in the response.
// Fractions are taken over eligible turns only; cells with an empty
// denominator report 0 alongside their eligible count.
BehaviorStats behavior_stats(
    const std::vector<std::string>& responses,
    const std::vector<std::vector<retriever::RetrievalResult>>& retrievals,
    const kb::KnowledgeBase& kb, metaknow::Thresholds thresholds = {});

// kind,key,usage_fraction,eligible_count
void write_behavior_csv(std::ostream& os, const BehaviorStats& stats);

// Fraction of turns with gold entities whose response mentions a gold
// entity's name; 0 when no turn has gold entities.
double gold_name_usage(const std::vector<std::string>& responses,
                       const std::vector<std::vector<std::string>>& gold_entity_ids,
                       const kb::KnowledgeBase& kb);

}  // namespace mktod::analysis
