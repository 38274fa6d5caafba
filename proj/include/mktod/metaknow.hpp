#pragma once

#include <string>
#include <vector>

#include "mktod/kb.hpp"
#include "mktod/retriever.hpp"

// Retrieval meta knowledge: order, confidence bucket, and co-occurrence for
// each retrieved entity, rendered either as control tokens or as natural
// language fragments; plus negative-entity selection.
namespace mktod::metaknow {

enum class Confidence { kLow, kMid, kHigh };
enum class Cooccur { kOld, kNew };

// rank 1..5 are positional; kOtherRank covers positions beyond 5 and the
// negative entity.
inline constexpr int kOtherRank = 0;
inline constexpr int kMaxNamedRank = 5;

struct MetaKnowledge {
    int rank = kOtherRank;
    Confidence confidence = Confidence::kLow;
    Cooccur cooccur = Cooccur::kNew;
    bool is_negative = false;

    bool operator==(const MetaKnowledge&) const = default;
};

struct Thresholds {
    double t_low = 0.4;
    double t_high = 0.75;
};

// Bucket for a softmax probability q: q <= t_low low, q > t_high high,
// in between mid.
Confidence confidence_bucket(double q, Thresholds thresholds = {});

// Confidence buckets act on the softmax prob q of each result: q <= t_low is
// low, q > t_high is high, in between is mid. Co-occurrence is old iff the
// entity's name value appears in the context. Results must arrive sorted
// with ranks 1..n.
std::vector<MetaKnowledge> compute_meta(const std::vector<retriever::RetrievalResult>& results,
                                        const std::string& context, const kb::KnowledgeBase& kb,
                                        Thresholds thresholds = {});

// The fixed annotation of the easy negative: not important, low confidence,
// new (never co-occurring by definition).
MetaKnowledge negative_meta();

// Three control tokens in (rank, confidence, co-occurrence) order, e.g.
// ["<2th-entity>", "<mid-confidence>", "<new-entity>"].
std::vector<std::string> render_prefix(const MetaKnowledge& meta);

enum class PromptMode {
    kSmallModel,  // colon-terminated fragments, (rank, confidence, co-occurrence)
    kLlm,         // sentence fragments, (confidence, rank, co-occurrence)
};

std::string render_prompt(const MetaKnowledge& meta, PromptMode mode);

// Explanation paragraph for chat-style generators describing the three
// annotation tags attached to each knowledge record.
const std::string& llm_tag_explanation();

// Entity with the lowest score over the whole KB among those not retrieved;
// ties by entity order. Requires at least one entity outside the retrieved
// set. Training-only: inference never adds negatives.
int select_negative(const std::vector<double>& all_scores, const kb::KnowledgeBase& kb,
                    const std::vector<retriever::RetrievalResult>& retrieved);

enum class RenderMode { kNone, kPrefix, kPromptSmall, kPromptLlm };

struct AnnotatedEntity {
    int entity_index = -1;
    MetaKnowledge meta;
    std::string rendering;  // "" in kNone mode
};

// Meta computation + rendering for a retrieved list in one pass.
std::vector<AnnotatedEntity> annotate(const std::vector<retriever::RetrievalResult>& results,
                                      const std::string& context, const kb::KnowledgeBase& kb,
                                      Thresholds thresholds, RenderMode mode);

std::string render_meta(const MetaKnowledge& meta, RenderMode mode);

}  // namespace mktod::metaknow
