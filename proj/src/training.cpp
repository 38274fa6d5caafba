#include "mktod/training.hpp"

#include <algorithm>
#include <map>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <utility>

#include "mktod/optim.hpp"

namespace mktod::train {

MetaMode parse_meta_mode(const std::string& name) {
    if (name == "none") return MetaMode::kNone;
    if (name == "prefix") return MetaMode::kPrefix;
    if (name == "prompt") return MetaMode::kPrompt;
    if (name == "ctr") return MetaMode::kCtr;
    throw std::invalid_argument("unknown meta mode: " + name);
}

std::string meta_mode_name(MetaMode mode) {
    switch (mode) {
        case MetaMode::kNone: return "none";
        case MetaMode::kPrefix: return "prefix";
        case MetaMode::kPrompt: return "prompt";
        case MetaMode::kCtr: return "ctr";
    }
    return "none";
}

metaknow::RenderMode render_mode_for(MetaMode mode) {
    switch (mode) {
        case MetaMode::kPrefix: return metaknow::RenderMode::kPrefix;
        case MetaMode::kPrompt: return metaknow::RenderMode::kPromptSmall;
        case MetaMode::kNone:
        case MetaMode::kCtr: return metaknow::RenderMode::kNone;
    }
    return metaknow::RenderMode::kNone;
}

// ---- loss terms ------------------------------------------------------------

ad::Tensor loss_nll(const gen::Generator& g, const std::string& context,
                    const std::vector<metaknow::AnnotatedEntity>& entities,
                    const kb::KnowledgeBase& kb, const std::vector<int>& response_ids) {
    if (entities.empty()) throw std::invalid_argument("loss_nll: entity set is empty");
    return ad::neg(g.log_likelihood(context, entities, kb, response_ids));
}

std::vector<ad::Tensor> single_entity_log_likelihoods(
    const gen::Generator& g, const std::string& context,
    const std::vector<metaknow::AnnotatedEntity>& entities, const kb::KnowledgeBase& kb,
    const std::vector<int>& response_ids, bool keep_renderings) {
    std::vector<ad::Tensor> out;
    out.reserve(entities.size());
    for (const auto& entity : entities) {
        auto single = entity;
        if (!keep_renderings) single.rendering.clear();
        out.push_back(g.log_likelihood(context, {single}, kb, response_ids));
    }
    return out;
}

ad::Tensor mml_from_parts(const ad::Tensor& scores, const std::vector<ad::Tensor>& log_liks,
                          bool stop_generator_grad) {
    if (log_liks.empty()) throw std::invalid_argument("loss_mml: no candidate entities");
    if (scores.size() != static_cast<std::int64_t>(log_liks.size())) {
        throw std::invalid_argument("loss_mml: " + std::to_string(scores.size()) +
                                    " scores vs " + std::to_string(log_liks.size()) +
                                    " likelihoods");
    }
    std::vector<ad::Tensor> parts;
    parts.reserve(log_liks.size());
    for (const auto& ll : log_liks) {
        parts.push_back(stop_generator_grad ? ll.detach() : ll);
    }
    return ad::neg(ad::logsumexp(ad::add(ad::log_softmax(scores), ad::concat(parts))));
}

namespace {

ad::Tensor differentiable_score(const retriever::DualEncoder& enc, const ad::Tensor& h_c,
                                const ad::Tensor& h_e) {
    auto s = ad::dot(h_c, h_e);
    if (!enc.config().cosine) return s;
    auto nc = ad::dot(h_c, h_c);
    auto ne = ad::dot(h_e, h_e);
    if (nc.item() <= 0.0 || ne.item() <= 0.0) return ad::Tensor::scalar(0.0);
    return ad::mul(ad::mul(s, ad::rsqrt(nc)), ad::rsqrt(ne));
}

ad::Tensor candidate_scores(const retriever::DualEncoder& enc, const std::string& context,
                            const std::vector<metaknow::AnnotatedEntity>& entities,
                            const kb::KnowledgeBase& kb) {
    auto h_c = enc.encode_context(context);
    std::vector<ad::Tensor> parts;
    parts.reserve(entities.size());
    for (const auto& entity : entities) {
        parts.push_back(differentiable_score(enc, h_c, enc.encode_entity(kb.entity(entity.entity_index))));
    }
    return ad::concat(parts);
}

}  // namespace

ad::Tensor loss_mml(const gen::Generator& g, const retriever::DualEncoder& enc,
                    const std::string& context,
                    const std::vector<metaknow::AnnotatedEntity>& entities,
                    const kb::KnowledgeBase& kb, const std::vector<int>& response_ids,
                    bool keep_renderings, bool stop_generator_grad) {
    if (entities.empty()) throw std::invalid_argument("loss_mml: no candidate entities");
    auto scores = candidate_scores(enc, context, entities, kb);
    auto lls =
        single_entity_log_likelihoods(g, context, entities, kb, response_ids, keep_renderings);
    return mml_from_parts(scores, lls, stop_generator_grad);
}

ad::Tensor ctr_from_parts(const std::vector<ad::Tensor>& positive_log_liks,
                          const ad::Tensor& baseline_log_lik, int response_len, double margin) {
    if (positive_log_liks.empty()) throw std::invalid_argument("loss_ctr: empty positive set");
    if (response_len <= 0) throw std::invalid_argument("loss_ctr: response length must be positive");
    const double inv_len = 1.0 / static_cast<double>(response_len);
    auto d_minus = ad::scale(baseline_log_lik, inv_len);
    std::vector<ad::Tensor> terms;
    terms.reserve(positive_log_liks.size());
    for (const auto& ll : positive_log_liks) {
        terms.push_back(ad::relu(ad::add_const(ad::sub(d_minus, ad::scale(ll, inv_len)), margin)));
    }
    return ad::sum(ad::concat(terms));
}

ad::Tensor loss_ctr(const gen::Generator& g, const std::string& context,
                    const std::vector<metaknow::AnnotatedEntity>& positives,
                    const kb::KnowledgeBase& kb, const std::vector<int>& response_ids,
                    double margin) {
    auto lls = single_entity_log_likelihoods(g, context, positives, kb, response_ids, true);
    auto baseline = g.log_likelihood(context, {}, kb, response_ids);
    return ctr_from_parts(lls, baseline, static_cast<int>(response_ids.size()), margin);
}

// ---- inference and evaluation ----------------------------------------------

RetrieveFn dense_retrieve_fn(const retriever::DualEncoder& enc,
                             const retriever::EntityIndex& index, const kb::KnowledgeBase& kb,
                             int k) {
    return [&enc, &index, &kb, k](const std::string& context, const dialogue::Turn&) {
        const auto h_c = enc.encode_context_frozen(context);
        return retriever::retrieve_topk(h_c, index, kb, k, enc.config().cosine);
    };
}

SystemEval run_inference(const RetrieveFn& retrieve, const gen::Generator& g,
                         const std::vector<const dialogue::Dialogue*>& dialogues,
                         const kb::KnowledgeBase& kb, metaknow::RenderMode mode,
                         metaknow::Thresholds thresholds, const std::vector<int>& ks) {
    SystemEval out;
    std::vector<std::string> references;
    std::vector<std::vector<std::string>> gold_values;
    std::vector<std::vector<std::string>> retrieved_ids;
    std::vector<std::vector<std::string>> gold_ids;
    std::vector<std::pair<std::string, int>> keys;
    for (const auto* d : dialogues) {
        for (int t = 0; t < static_cast<int>(d->turns.size()); ++t) {
            const auto& turn = d->turns[static_cast<std::size_t>(t)];
            const auto context = dialogue::context_text(*d, t);
            auto results = retrieve(context, turn);
            auto annotated = metaknow::annotate(results, context, kb, thresholds, mode);
            out.responses.push_back(g.vocab().decode(g.generate(context, annotated, kb)));
            references.push_back(turn.system);
            gold_values.push_back(eval::gold_values_for_turn(turn, kb));
            std::vector<std::string> ids;
            ids.reserve(results.size());
            for (const auto& r : results) ids.push_back(r.entity_id);
            retrieved_ids.push_back(std::move(ids));
            gold_ids.push_back(turn.gold_entity_ids);
            out.retrievals.push_back(std::move(results));
            keys.emplace_back(d->id, t);
        }
    }
    if (out.responses.empty()) throw std::invalid_argument("run_inference: no turns to evaluate");
    out.report = eval::evaluate_outputs(out.responses, references, gold_values, retrieved_ids,
                                        gold_ids, kb, ks);
    for (std::size_t i = 0; i < keys.size(); ++i) {
        out.report.turns[i].dialogue_id = keys[i].first;
        out.report.turns[i].turn_index = keys[i].second;
    }
    return out;
}

// ---- the joint training loop -----------------------------------------------

namespace {

void write_csv_row(std::ostream& os, const StepLog& row) {
    os << row.step << ',' << row.loss_nll << ',' << row.loss_mml << ',' << row.loss_ctr << ',';
    if (row.val_entity_f1 >= 0.0) os << row.val_entity_f1;
    os << ',';
    if (row.val_recall >= 0.0) os << row.val_recall;
    os << '\n';
}

constexpr const char* kCsvHeader = "step,loss_nll,loss_mml,loss_ctr,val_entity_f1,val_recall_at_k";

void validate_config(const TrainConfig& cfg, const kb::KnowledgeBase& kb) {
    if (cfg.alpha < 0.0 || cfg.beta < 0.0 || cfg.gamma < 0.0) {
        throw std::invalid_argument("loss weights must be non-negative");
    }
    if (cfg.margin <= 0.0) throw std::invalid_argument("margin must be positive");
    if (cfg.top_k < 1 || cfg.top_k > static_cast<int>(kb.size())) {
        throw std::invalid_argument("top_k=" + std::to_string(cfg.top_k) +
                                    " outside [1," + std::to_string(kb.size()) + "]");
    }
    if (cfg.steps < 0) throw std::invalid_argument("steps must be non-negative");
    if (cfg.batch_size < 1 || cfg.grad_accum_steps < 1 || cfg.positive_set_size < 1) {
        throw std::invalid_argument("batch sizes and positive set size must be at least 1");
    }
    if (cfg.index_rebuild_every < 1) {
        throw std::invalid_argument("index_rebuild_every must be at least 1");
    }
    const bool nll = cfg.alpha > 0.0;
    const bool mml = cfg.use_mml && cfg.beta > 0.0;
    const bool ctr = cfg.meta_mode == MetaMode::kCtr && cfg.gamma > 0.0;
    if (!nll && !mml && !ctr) throw std::invalid_argument("no loss terms enabled");
}

}  // namespace

void write_log_csv(std::ostream& os, const std::vector<StepLog>& log) {
    os << kCsvHeader << '\n';
    for (const auto& row : log) write_csv_row(os, row);
}

TrainResult train(ad::ParameterStore& store, retriever::DualEncoder& enc, gen::Generator& g,
                  const std::vector<dialogue::Dialogue>& dialogues, const kb::KnowledgeBase& kb,
                  const TrainConfig& cfg, std::ostream* log_stream) {
    validate_config(cfg, kb);
    TrainResult result;
    if (cfg.steps == 0) return result;

    std::vector<std::pair<const dialogue::Dialogue*, int>> examples;
    for (const auto* d : dialogue::filter_split(dialogues, "train")) {
        for (int t = 0; t < static_cast<int>(d->turns.size()); ++t) examples.emplace_back(d, t);
    }
    if (examples.empty()) throw std::invalid_argument("train: no training turns");
    result.train_examples = static_cast<int>(examples.size());
    const auto valid = dialogue::filter_split(dialogues, "valid");

    ad::Rng rng(ad::mix_seed(cfg.seed, "train.batch"));
    optim::Adam adam_ret(store,
                         {.lr = cfg.retriever_lr,
                          .weight_decay = cfg.weight_decay,
                          .clip_norm = cfg.clip_norm,
                          .total_steps = cfg.steps},
                         "ret.");
    optim::Adam adam_gen(store,
                         {.lr = cfg.generator_lr,
                          .weight_decay = cfg.weight_decay,
                          .clip_norm = cfg.clip_norm,
                          .total_steps = cfg.steps},
                         "gen.");

    const metaknow::RenderMode rm = render_mode_for(cfg.meta_mode);
    const bool want_nll = cfg.alpha > 0.0;
    const bool want_mml = cfg.use_mml && cfg.beta > 0.0;
    const bool want_ctr = cfg.meta_mode == MetaMode::kCtr && cfg.gamma > 0.0;
    const int per_step = cfg.batch_size * cfg.grad_accum_steps;
    const double inv_scale = 1.0 / static_cast<double>(per_step);

    auto index = retriever::build_entity_index(enc, kb, 0);
    if (log_stream) *log_stream << kCsvHeader << '\n';

    std::map<std::string, std::vector<double>> best_snapshot;

    auto evaluate_valid = [&](int step, StepLog& row) {
        auto val_index = retriever::build_entity_index(enc, kb, step);
        auto fn = dense_retrieve_fn(enc, val_index, kb, cfg.top_k);
        auto ev = run_inference(fn, g, valid, kb, rm, cfg.thresholds, {cfg.top_k});
        row.val_entity_f1 = ev.report.entity.f1;
        row.val_recall = ev.report.recall_at_k.at(cfg.top_k);
        if (row.val_entity_f1 > result.best_val_f1) {
            result.best_val_f1 = row.val_entity_f1;
            result.best_step = step;
            best_snapshot = store.snapshot();
        }
        result.final_val_f1 = row.val_entity_f1;
        result.final_val_recall = row.val_recall;
    };

    // Builds the weighted loss graph for one sampled turn and accumulates its
    // gradient. Throws std::domain_error on any non-finite value.
    auto accumulate_example = [&](const dialogue::Dialogue& dlg, int tix, StepLog& row) {
        const auto& turn = dlg.turns[static_cast<std::size_t>(tix)];
        const auto context = dialogue::context_text(dlg, tix);
        const auto response_ids = g.encode_response(turn.system);

        const auto h_c_frozen = enc.encode_context_frozen(context);
        auto results =
            retriever::retrieve_topk(h_c_frozen, index, kb, cfg.top_k, enc.config().cosine);
        auto annotated = metaknow::annotate(results, context, kb, cfg.thresholds, rm);
        if (cfg.use_negative && cfg.top_k < kb.size()) {
            const auto all_scores = retriever::score_all(h_c_frozen, index, enc.config().cosine);
            metaknow::AnnotatedEntity negative;
            negative.entity_index = metaknow::select_negative(all_scores, kb, results);
            negative.meta = metaknow::negative_meta();
            negative.rendering = metaknow::render_meta(negative.meta, rm);
            annotated.push_back(std::move(negative));
        }

        std::vector<ad::Tensor> weighted;
        std::vector<ad::Tensor> lls;
        if (want_nll) {
            auto term = loss_nll(g, context, annotated, kb, response_ids);
            row.loss_nll += term.item();
            weighted.push_back(ad::scale(term, cfg.alpha));
        }
        if (want_mml) {
            auto scores = candidate_scores(enc, context, annotated, kb);
            lls = single_entity_log_likelihoods(g, context, annotated, kb, response_ids,
                                                cfg.annotate_single_entities);
            auto term = mml_from_parts(scores, lls, cfg.stop_generator_grad_in_mml);
            row.loss_mml += term.item();
            weighted.push_back(ad::scale(term, cfg.beta));
        }
        if (want_ctr) {
            const int positives = std::min(cfg.positive_set_size, static_cast<int>(results.size()));
            std::vector<ad::Tensor> pos;
            if (want_mml) {
                pos.assign(lls.begin(), lls.begin() + positives);
            } else {
                const std::vector<metaknow::AnnotatedEntity> subset(annotated.begin(),
                                                                    annotated.begin() + positives);
                pos = single_entity_log_likelihoods(g, context, subset, kb, response_ids,
                                                    cfg.annotate_single_entities);
            }
            auto baseline = g.log_likelihood(context, {}, kb, response_ids);
            auto term =
                ctr_from_parts(pos, baseline, static_cast<int>(response_ids.size()), cfg.margin);
            row.loss_ctr += term.item();
            weighted.push_back(ad::scale(term, cfg.gamma));
        }
        ad::Tensor total = weighted[0];
        for (std::size_t w = 1; w < weighted.size(); ++w) total = ad::add(total, weighted[w]);
        row.loss_total += total.item();
        if (!std::isfinite(total.item())) throw std::domain_error("non-finite loss value");
        ad::backward(ad::scale(total, inv_scale));
    };

    for (int step = 1; step <= cfg.steps; ++step) {
        if (step > 1 && (step - 1) % cfg.index_rebuild_every == 0) {
            index = retriever::build_entity_index(enc, kb, step - 1);
        }
        store.zero_grads();
        StepLog row;
        row.step = step;
        for (int b = 0; b < per_step; ++b) {
            const auto& [dlg, tix] =
                examples[static_cast<std::size_t>(rng.next_int(
                    static_cast<std::int64_t>(examples.size())))];
            try {
                accumulate_example(*dlg, tix, row);
            } catch (const std::domain_error& e) {
                throw std::runtime_error("training diverged (" + std::string(e.what()) +
                                         ") at step " + std::to_string(step));
            }
        }
        adam_ret.step();
        adam_gen.step();

        row.loss_nll /= per_step;
        row.loss_mml /= per_step;
        row.loss_ctr /= per_step;
        row.loss_total /= per_step;

        const bool log_now = (cfg.log_every > 0 && step % cfg.log_every == 0) || step == cfg.steps;
        const bool eval_now =
            !valid.empty() &&
            ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps);
        if (eval_now) evaluate_valid(step, row);
        if (log_now || eval_now) {
            if (log_stream) write_csv_row(*log_stream, row);
            result.log.push_back(row);
        }
    }

    if (!best_snapshot.empty()) {
        store.restore(best_snapshot);
        result.final_val_f1 = result.best_val_f1;
    }
    return result;
}

}  // namespace mktod::train
