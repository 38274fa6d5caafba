#include "mktod/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "mktod/text.hpp"

namespace mktod::eval {

namespace {

std::map<std::vector<std::string>, long> ngram_counts(const std::vector<std::string>& tokens,
                                                      int n) {
    std::map<std::vector<std::string>, long> counts;
    if (static_cast<int>(tokens.size()) < n) return counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
        counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                        tokens.begin() + static_cast<std::ptrdiff_t>(i) + n)]++;
    }
    return counts;
}

std::set<std::string> predicted_values(const std::string& response, const kb::KnowledgeBase& kb) {
    std::set<std::string> out;
    for (const auto& mention : kb::find_value_mentions(response, kb)) out.insert(mention.value);
    return out;
}

}  // namespace

double bleu(const std::vector<std::vector<std::string>>& candidates,
            const std::vector<std::vector<std::string>>& references) {
    if (candidates.size() != references.size()) {
        throw std::invalid_argument("bleu: " + std::to_string(candidates.size()) +
                                    " candidates vs " + std::to_string(references.size()) +
                                    " references");
    }
    if (candidates.empty()) throw std::invalid_argument("bleu: empty corpus");

    long cand_len = 0;
    long ref_len = 0;
    double log_precision_sum = 0.0;
    for (int n = 1; n <= 4; ++n) {
        long matched = 0;
        long total = 0;
        for (std::size_t p = 0; p < candidates.size(); ++p) {
            const auto cand = ngram_counts(candidates[p], n);
            const auto ref = ngram_counts(references[p], n);
            for (const auto& [gram, count] : cand) {
                total += count;
                auto it = ref.find(gram);
                if (it != ref.end()) matched += std::min(count, it->second);
            }
        }
        if (matched == 0) return 0.0;
        log_precision_sum += 0.25 * std::log(static_cast<double>(matched) /
                                             static_cast<double>(total));
    }
    for (std::size_t p = 0; p < candidates.size(); ++p) {
        cand_len += static_cast<long>(candidates[p].size());
        ref_len += static_cast<long>(references[p].size());
    }
    if (cand_len == 0) return 0.0;
    const double bp =
        cand_len >= ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
    return bp * std::exp(log_precision_sum);
}

EntityScore entity_f1(const std::vector<std::string>& responses,
                      const std::vector<std::vector<std::string>>& gold_value_sets,
                      const kb::KnowledgeBase& kb) {
    if (responses.size() != gold_value_sets.size()) {
        throw std::invalid_argument("entity_f1: responses and gold sets differ in length");
    }
    EntityScore score;
    for (std::size_t t = 0; t < responses.size(); ++t) {
        const auto predicted = predicted_values(responses[t], kb);
        const std::set<std::string> gold(gold_value_sets[t].begin(), gold_value_sets[t].end());
        for (const auto& v : predicted) {
            if (gold.count(v)) {
                ++score.tp;
            } else {
                ++score.fp;
            }
        }
        for (const auto& v : gold) {
            if (!predicted.count(v)) ++score.fn;
        }
    }
    score.precision =
        score.tp + score.fp == 0
            ? 0.0
            : static_cast<double>(score.tp) / static_cast<double>(score.tp + score.fp);
    score.recall = score.tp + score.fn == 0
                       ? 0.0
                       : static_cast<double>(score.tp) / static_cast<double>(score.tp + score.fn);
    score.f1 = score.precision + score.recall == 0.0
                   ? 0.0
                   : 2.0 * score.precision * score.recall / (score.precision + score.recall);
    return score;
}

double recall_at_k(const std::vector<std::vector<std::string>>& retrieved_ids,
                   const std::vector<std::vector<std::string>>& gold_entity_ids, int k) {
    if (retrieved_ids.size() != gold_entity_ids.size()) {
        throw std::invalid_argument("recall_at_k: lists differ in length");
    }
    if (k < 1) throw std::invalid_argument("recall_at_k: K must be positive");
    long hits = 0;
    long eligible = 0;
    for (std::size_t t = 0; t < retrieved_ids.size(); ++t) {
        if (gold_entity_ids[t].empty()) continue;
        if (k > static_cast<int>(retrieved_ids[t].size())) {
            throw std::invalid_argument("recall_at_k: K=" + std::to_string(k) +
                                        " exceeds retrieved list of length " +
                                        std::to_string(retrieved_ids[t].size()));
        }
        ++eligible;
        const std::set<std::string> top(retrieved_ids[t].begin(),
                                        retrieved_ids[t].begin() + k);
        bool all = true;
        for (const auto& gold : gold_entity_ids[t]) {
            if (!top.count(gold)) {
                all = false;
                break;
            }
        }
        if (all) ++hits;
    }
    return eligible == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(eligible);
}

std::vector<std::string> gold_values_for_turn(const dialogue::Turn& turn,
                                              const kb::KnowledgeBase& kb) {
    const std::set<std::string> gold_ids(turn.gold_entity_ids.begin(),
                                         turn.gold_entity_ids.end());
    std::set<std::string> values;
    for (const auto& mention : kb::find_value_mentions(turn.system, kb)) {
        if (gold_ids.count(mention.entity_id)) values.insert(mention.value);
    }
    return {values.begin(), values.end()};
}

MetricReport evaluate_outputs(const std::vector<std::string>& responses,
                              const std::vector<std::string>& references,
                              const std::vector<std::vector<std::string>>& gold_value_sets,
                              const std::vector<std::vector<std::string>>& retrieved_ids,
                              const std::vector<std::vector<std::string>>& gold_entity_ids,
                              const kb::KnowledgeBase& kb, const std::vector<int>& ks) {
    const std::size_t n = responses.size();
    if (references.size() != n || gold_value_sets.size() != n || retrieved_ids.size() != n ||
        gold_entity_ids.size() != n) {
        throw std::invalid_argument("evaluate_outputs: per-turn lists differ in length");
    }
    MetricReport report;
    std::vector<std::vector<std::string>> cand_tokens;
    std::vector<std::vector<std::string>> ref_tokens;
    cand_tokens.reserve(n);
    ref_tokens.reserve(n);
    for (std::size_t t = 0; t < n; ++t) {
        cand_tokens.push_back(text::tokenize(responses[t]));
        ref_tokens.push_back(text::tokenize(references[t]));
    }
    report.bleu = bleu(cand_tokens, ref_tokens);
    report.entity = entity_f1(responses, gold_value_sets, kb);
    for (int k : ks) report.recall_at_k[k] = recall_at_k(retrieved_ids, gold_entity_ids, k);

    const int hit_k = ks.empty() ? 0 : ks.front();
    for (std::size_t t = 0; t < n; ++t) {
        TurnBreakdown row;
        row.turn_index = static_cast<int>(t);
        const auto predicted = predicted_values(responses[t], kb);
        row.predicted_values.assign(predicted.begin(), predicted.end());
        const std::set<std::string> gold(gold_value_sets[t].begin(), gold_value_sets[t].end());
        row.gold_values.assign(gold.begin(), gold.end());
        for (const auto& v : predicted) {
            gold.count(v) ? ++row.tp : ++row.fp;
        }
        for (const auto& v : gold) {
            if (!predicted.count(v)) ++row.fn;
        }
        row.has_gold_entities = !gold_entity_ids[t].empty();
        if (row.has_gold_entities && hit_k > 0) {
            row.retrieval_hit =
                recall_at_k({retrieved_ids[t]}, {gold_entity_ids[t]}, hit_k) == 1.0;
        }
        report.turns.push_back(std::move(row));
    }
    return report;
}

}  // namespace mktod::eval
