#include "mktod/metaknow.hpp"

#include <stdexcept>

namespace mktod::metaknow {

std::vector<MetaKnowledge> compute_meta(const std::vector<retriever::RetrievalResult>& results,
                                        const std::string& context, const kb::KnowledgeBase& kb,
                                        Thresholds thresholds) {
    for (std::size_t i = 0; i < results.size(); ++i) {
        if (results[i].rank != static_cast<int>(i) + 1) {
            throw std::invalid_argument("compute_meta: results must be sorted with ranks 1..n, got rank " +
                                        std::to_string(results[i].rank) + " at position " +
                                        std::to_string(i));
        }
    }

    // One mention scan per context, shared across all results.
    const auto mentions = kb::find_value_mentions(context, kb);
    auto name_in_context = [&](const std::string& entity_id) {
        for (const auto& m : mentions) {
            if (m.entity_id == entity_id && m.attribute == kb.name_attribute()) return true;
        }
        return false;
    };

    std::vector<MetaKnowledge> out;
    out.reserve(results.size());
    for (const auto& r : results) {
        MetaKnowledge meta;
        meta.rank = r.rank <= kMaxNamedRank ? r.rank : kOtherRank;
        meta.confidence = confidence_bucket(r.prob, thresholds);
        meta.cooccur = name_in_context(r.entity_id) ? Cooccur::kOld : Cooccur::kNew;
        out.push_back(meta);
    }
    return out;
}

Confidence confidence_bucket(double q, Thresholds thresholds) {
    if (q > thresholds.t_high) return Confidence::kHigh;
    if (q > thresholds.t_low) return Confidence::kMid;
    return Confidence::kLow;
}

MetaKnowledge negative_meta() {
    MetaKnowledge meta;
    meta.rank = kOtherRank;
    meta.confidence = Confidence::kLow;
    meta.cooccur = Cooccur::kNew;
    meta.is_negative = true;
    return meta;
}

std::vector<std::string> render_prefix(const MetaKnowledge& meta) {
    static const char* rank_tokens[] = {"<other-entity>", "<1th-entity>", "<2th-entity>",
                                        "<3th-entity>",   "<4th-entity>", "<5th-entity>"};
    std::vector<std::string> out;
    out.push_back(rank_tokens[meta.rank]);
    switch (meta.confidence) {
        case Confidence::kHigh: out.push_back("<high-confidence>"); break;
        case Confidence::kMid: out.push_back("<mid-confidence>"); break;
        case Confidence::kLow: out.push_back("<low-confidence>"); break;
    }
    out.push_back(meta.cooccur == Cooccur::kOld ? "<old-entity>" : "<new-entity>");
    return out;
}

std::string render_prompt(const MetaKnowledge& meta, PromptMode mode) {
    std::string rank, confidence, cooccur;
    if (mode == PromptMode::kSmallModel) {
        rank = meta.rank == kOtherRank
                   ? "The negative entity recalled:"
                   : "The top-" + std::to_string(meta.rank) + " recalled:";
        switch (meta.confidence) {
            case Confidence::kHigh: confidence = "with high confidence:"; break;
            case Confidence::kMid: confidence = "with middle confidence:"; break;
            case Confidence::kLow: confidence = "with low confidence:"; break;
        }
        cooccur = meta.cooccur == Cooccur::kOld ? "existed in history:" : "newly recalled:";
        return rank + " " + confidence + " " + cooccur;
    }
    rank = meta.rank == kOtherRank
               ? "this entity is not important."
               : "this entity is top-" + std::to_string(meta.rank) + " important.";
    switch (meta.confidence) {
        case Confidence::kHigh: confidence = "It has high possibility that"; break;
        case Confidence::kMid: confidence = "It has medium possibility that"; break;
        case Confidence::kLow: confidence = "It has low possibility that"; break;
    }
    cooccur = meta.cooccur == Cooccur::kOld ? "This entity has appeared before."
                                            : "This is a new entity.";
    return confidence + " " + rank + " " + cooccur;
}

const std::string& llm_tag_explanation() {
    static const std::string text =
        "Each record of knowledge base is accompanied by three tags. The first tag indicates "
        "whether this entity appeared before. <new-entity> means this is a new entity, and "
        "<old-entity> means this entity appeared before. The second tag indicates the "
        "authenticity of the third tag. There are three types <low-confidence>, <mid-confidence> "
        "and <high-confidence> indicating low, middle, high retrieval confidence respectively. A "
        "higher retrieval confidence means the entity is potentially more related to the user "
        "goal. The third tag indicates its importance to the dialogue. <nth-entity> means it is "
        "the nth important entity in the knowledge base, for example, <1th-entity> is the top-1 "
        "important and <other-entity> means it is not important.";
    return text;
}

int select_negative(const std::vector<double>& all_scores, const kb::KnowledgeBase& kb,
                    const std::vector<retriever::RetrievalResult>& retrieved) {
    if (static_cast<int>(all_scores.size()) != kb.size()) {
        throw std::invalid_argument("select_negative: got " + std::to_string(all_scores.size()) +
                                    " scores for " + std::to_string(kb.size()) + " entities");
    }
    if (static_cast<int>(retrieved.size()) >= kb.size()) {
        throw std::invalid_argument("select_negative: every entity is already retrieved (B <= K)");
    }
    std::vector<bool> taken(static_cast<std::size_t>(kb.size()), false);
    for (const auto& r : retrieved) taken[static_cast<std::size_t>(r.entity_index)] = true;

    int best = -1;
    for (int i = 0; i < kb.size(); ++i) {
        if (taken[static_cast<std::size_t>(i)]) continue;
        if (best < 0 || all_scores[static_cast<std::size_t>(i)] < all_scores[static_cast<std::size_t>(best)]) {
            best = i;
        }
    }
    return best;
}

std::string render_meta(const MetaKnowledge& meta, RenderMode mode) {
    switch (mode) {
        case RenderMode::kNone: return "";
        case RenderMode::kPrefix: {
            const auto tokens = render_prefix(meta);
            return tokens[0] + " " + tokens[1] + " " + tokens[2];
        }
        case RenderMode::kPromptSmall: return render_prompt(meta, PromptMode::kSmallModel);
        case RenderMode::kPromptLlm: return render_prompt(meta, PromptMode::kLlm);
    }
    return "";
}

std::vector<AnnotatedEntity> annotate(const std::vector<retriever::RetrievalResult>& results,
                                      const std::string& context, const kb::KnowledgeBase& kb,
                                      Thresholds thresholds, RenderMode mode) {
    const auto metas = compute_meta(results, context, kb, thresholds);
    std::vector<AnnotatedEntity> out;
    out.reserve(results.size());
    for (std::size_t i = 0; i < results.size(); ++i) {
        out.push_back({results[i].entity_index, metas[i], render_meta(metas[i], mode)});
    }
    return out;
}

}  // namespace mktod::metaknow
