#include "mktod/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <unordered_set>

namespace mktod::analysis {

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) {
        throw std::invalid_argument("pearson: " + std::to_string(x.size()) + " vs " +
                                    std::to_string(y.size()) + " points");
    }
    if (x.size() < 2) throw std::invalid_argument("pearson: need at least two points");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw std::invalid_argument("pearson: zero variance, correlation undefined");
    }
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<NamedRetriever> standard_zoo(const retriever::Bm25Index& bm25,
                                         const retriever::DualEncoder& pretrained,
                                         const retriever::EntityIndex& pretrained_index,
                                         const retriever::DualEncoder& joint,
                                         const retriever::EntityIndex& joint_index,
                                         const kb::KnowledgeBase& kb, int k) {
    std::vector<NamedRetriever> zoo;
    zoo.push_back({"bm25", [&bm25, k](const std::string& context, const dialogue::Turn&) {
                       return bm25.topk(context, k);
                   }});
    zoo.push_back({"frequency", [&kb, k](const std::string& context, const dialogue::Turn&) {
                       return retriever::frequency_retrieve(context, kb, k);
                   }});
    zoo.push_back({"pretrained-dense",
                   train::dense_retrieve_fn(pretrained, pretrained_index, kb, k)});
    zoo.push_back({"jointly-trained-dense", train::dense_retrieve_fn(joint, joint_index, kb, k)});
    zoo.push_back({"oracle", [&kb, k](const std::string&, const dialogue::Turn& turn) {
                       return retriever::oracle_retrieve(turn.gold_entity_ids, kb, k);
                   }});
    return zoo;
}

namespace {

std::size_t distinct_count(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
}

// Ids of entities whose name value appears in the text.
std::unordered_set<std::string> named_entities(const std::string& text,
                                               const kb::KnowledgeBase& kb) {
    std::unordered_set<std::string> out;
    for (const auto& m : kb::find_value_mentions(text, kb)) {
        if (m.attribute == kb.name_attribute()) out.insert(m.entity_id);
    }
    return out;
}

}  // namespace

StudyResult misalignment_study(const std::vector<NamedRetriever>& zoo,
                               const std::vector<NamedGenerator>& generators,
                               const std::vector<const dialogue::Dialogue*>& dialogues,
                               const kb::KnowledgeBase& kb, metaknow::Thresholds thresholds,
                               int k) {
    if (zoo.size() < 3) {
        throw std::invalid_argument("misalignment_study: need at least 3 retrievers, got " +
                                    std::to_string(zoo.size()));
    }
    if (generators.empty()) {
        throw std::invalid_argument("misalignment_study: need at least one generator");
    }
    StudyResult out;
    for (const auto& ng : generators) {
        if (!ng.generator) throw std::invalid_argument("misalignment_study: null generator");
        if (out.correlation.count(ng.name)) {
            throw std::invalid_argument("misalignment_study: duplicate generator name " + ng.name);
        }
        std::vector<double> recalls, f1s;
        for (const auto& nr : zoo) {
            auto ev = train::run_inference(nr.fn, *ng.generator, dialogues, kb, ng.mode,
                                           thresholds, {k});
            AlignmentRow row;
            row.generator_name = ng.name;
            row.retriever_name = nr.name;
            row.recall_at_k = ev.report.recall_at_k.at(k);
            row.entity_f1 = ev.report.entity.f1;
            row.bleu = ev.report.bleu;
            recalls.push_back(row.recall_at_k);
            f1s.push_back(row.entity_f1);
            out.rows.push_back(std::move(row));
        }
        if (distinct_count(recalls) >= 2 && distinct_count(f1s) >= 2) {
            out.correlation[ng.name] = pearson(recalls, f1s);
        } else {
            out.correlation[ng.name] = std::nullopt;
        }
    }
    return out;
}

void write_alignment_csv(std::ostream& os, const std::vector<AlignmentRow>& rows) {
    os << "generator,retriever,recall_at_k,entity_f1,bleu\n";
    for (const auto& r : rows) {
        os << r.generator_name << ',' << r.retriever_name << ',' << r.recall_at_k << ','
           << r.entity_f1 << ',' << r.bleu << '\n';
    }
}

BehaviorStats behavior_stats(
    const std::vector<std::string>& responses,
    const std::vector<std::vector<retriever::RetrievalResult>>& retrievals,
    const kb::KnowledgeBase& kb, metaknow::Thresholds thresholds) {
    if (responses.size() != retrievals.size()) {
        throw std::invalid_argument("behavior_stats: " + std::to_string(responses.size()) +
                                    " responses vs " + std::to_string(retrievals.size()) +
                                    " retrieval lists");
    }
    BehaviorStats stats;
    stats.total_turns = static_cast<int>(responses.size());
    int max_rank = 0;
    for (const auto& rs : retrievals) {
        for (const auto& r : rs) {
            if (r.rank < 1) throw std::invalid_argument("behavior_stats: ranks must be 1-based");
            max_rank = std::max(max_rank, r.rank);
        }
    }
    stats.rank_usage.assign(static_cast<std::size_t>(max_rank), 0.0);
    stats.rank_eligible.assign(static_cast<std::size_t>(max_rank), 0);
    stats.confidence_usage.assign(3, 0.0);
    stats.confidence_eligible.assign(3, 0);
    std::vector<int> rank_used(static_cast<std::size_t>(max_rank), 0);
    std::vector<int> conf_used(3, 0);

    for (std::size_t i = 0; i < responses.size(); ++i) {
        const auto named = named_entities(responses[i], kb);
        bool any_used = false;
        for (const auto& r : retrievals[i]) {
            if (named.count(r.entity_id)) {
                any_used = true;
                break;
            }
        }
        if (!any_used) continue;
        ++stats.eligible_turns;
        for (const auto& r : retrievals[i]) {
            const bool used = named.count(r.entity_id) > 0;
            const auto rank_ix = static_cast<std::size_t>(r.rank - 1);
            ++stats.rank_eligible[rank_ix];
            rank_used[rank_ix] += used ? 1 : 0;
            const auto bucket =
                static_cast<std::size_t>(metaknow::confidence_bucket(r.prob, thresholds));
            ++stats.confidence_eligible[bucket];
            conf_used[bucket] += used ? 1 : 0;
        }
    }
    for (std::size_t r = 0; r < stats.rank_usage.size(); ++r) {
        if (stats.rank_eligible[r] > 0) {
            stats.rank_usage[r] = static_cast<double>(rank_used[r]) / stats.rank_eligible[r];
        }
    }
    for (std::size_t b = 0; b < 3; ++b) {
        if (stats.confidence_eligible[b] > 0) {
            stats.confidence_usage[b] =
                static_cast<double>(conf_used[b]) / stats.confidence_eligible[b];
        }
    }
    return stats;
}

void write_behavior_csv(std::ostream& os, const BehaviorStats& stats) {
    os << "kind,key,usage_fraction,eligible_count\n";
    for (std::size_t r = 0; r < stats.rank_usage.size(); ++r) {
        os << "rank," << r + 1 << ',' << stats.rank_usage[r] << ',' << stats.rank_eligible[r]
           << '\n';
    }
    static constexpr const char* kBucketNames[] = {"low", "mid", "high"};
    for (std::size_t b = 0; b < 3; ++b) {
        os << "confidence," << kBucketNames[b] << ',' << stats.confidence_usage[b] << ','
           << stats.confidence_eligible[b] << '\n';
    }
}

double gold_name_usage(const std::vector<std::string>& responses,
                       const std::vector<std::vector<std::string>>& gold_entity_ids,
                       const kb::KnowledgeBase& kb) {
    if (responses.size() != gold_entity_ids.size()) {
        throw std::invalid_argument("gold_name_usage: " + std::to_string(responses.size()) +
                                    " responses vs " + std::to_string(gold_entity_ids.size()) +
                                    " gold sets");
    }
    int eligible = 0;
    int used = 0;
    for (std::size_t i = 0; i < responses.size(); ++i) {
        if (gold_entity_ids[i].empty()) continue;
        ++eligible;
        const auto named = named_entities(responses[i], kb);
        for (const auto& id : gold_entity_ids[i]) {
            if (named.count(id)) {
                ++used;
                break;
            }
        }
    }
    return eligible > 0 ? static_cast<double>(used) / eligible : 0.0;
}

}  // namespace mktod::analysis
