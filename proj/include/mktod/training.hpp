#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "mktod/autodiff.hpp"
#include "mktod/dialogue.hpp"
#include "mktod/eval.hpp"
#include "mktod/generator.hpp"
#include "mktod/kb.hpp"
#include "mktod/metaknow.hpp"
#include "mktod/retriever.hpp"

// Joint retriever/generator training: negative log-likelihood over the
// annotated entity set, maximal marginal likelihood over re-encoded
// candidates, and the optional contrastive margin loss.
namespace mktod::train {

// How meta knowledge reaches the generator: special tokens, natural-language
// prompt sentences, the contrastive loss term, or not at all.
enum class MetaMode { kNone, kPrefix, kPrompt, kCtr };

MetaMode parse_meta_mode(const std::string& name);
std::string meta_mode_name(MetaMode mode);
metaknow::RenderMode render_mode_for(MetaMode mode);

struct TrainConfig {
    double alpha = 1.0;  // weight of the NLL term
    double beta = 1.0;   // weight of the MML term
    double gamma = 1.0;  // weight of the contrastive term (kCtr only)
    double margin = 0.01;
    int top_k = 7;
    int steps = 1500;
    double retriever_lr = 1e-4;
    double generator_lr = 1e-4;
    double weight_decay = 0.01;
    double clip_norm = 0.01;
    int batch_size = 2;
    int grad_accum_steps = 32;
    int positive_set_size = 1;
    bool use_mml = true;
    bool use_negative = true;
    bool annotate_single_entities = true;
    bool stop_generator_grad_in_mml = false;
    MetaMode meta_mode = MetaMode::kPrefix;
    std::uint64_t seed = 13;
    int index_rebuild_every = 100;
    int eval_every = 250;  // validation cadence in optimizer steps; 0 = final only
    int log_every = 50;
    metaknow::Thresholds thresholds{};
};

// ---- loss terms ------------------------------------------------------------

// -log p(r | c, E) with the full annotated entity set in the generator
// input; the set must be non-empty.
ad::Tensor loss_nll(const gen::Generator& g, const std::string& context,
                    const std::vector<metaknow::AnnotatedEntity>& entities,
                    const kb::KnowledgeBase& kb, const std::vector<int>& response_ids);

// log p(r | c, e_i) for each entity conditioned on alone; keep_renderings
// controls whether the per-entity meta rendering stays in the input.
std::vector<ad::Tensor> single_entity_log_likelihoods(
    const gen::Generator& g, const std::string& context,
    const std::vector<metaknow::AnnotatedEntity>& entities, const kb::KnowledgeBase& kb,
    const std::vector<int>& response_ids, bool keep_renderings);

// -log sum_i softmax(scores)_i p_i computed in log space from differentiable
// retrieval scores and per-entity log-likelihoods. stop_generator_grad
// detaches the likelihood factors so only the retriever receives gradient.
ad::Tensor mml_from_parts(const ad::Tensor& scores, const std::vector<ad::Tensor>& log_liks,
                          bool stop_generator_grad = false);

ad::Tensor loss_mml(const gen::Generator& g, const retriever::DualEncoder& enc,
                    const std::string& context,
                    const std::vector<metaknow::AnnotatedEntity>& entities,
                    const kb::KnowledgeBase& kb, const std::vector<int>& response_ids,
                    bool keep_renderings = true, bool stop_generator_grad = false);

// sum_i max(0, d_minus - d_i + margin) over length-normalized
// log-likelihoods d = log p / |r|.
ad::Tensor ctr_from_parts(const std::vector<ad::Tensor>& positive_log_liks,
                          const ad::Tensor& baseline_log_lik, int response_len, double margin);

ad::Tensor loss_ctr(const gen::Generator& g, const std::string& context,
                    const std::vector<metaknow::AnnotatedEntity>& positives,
                    const kb::KnowledgeBase& kb, const std::vector<int>& response_ids,
                    double margin);

// ---- inference and evaluation ----------------------------------------------

// Retrieval callback: the turn is available so oracle retrieval can read
// gold ids; dense retrievers use only the context text.
using RetrieveFn = std::function<std::vector<retriever::RetrievalResult>(
    const std::string& context, const dialogue::Turn& turn)>;

RetrieveFn dense_retrieve_fn(const retriever::DualEncoder& enc,
                             const retriever::EntityIndex& index, const kb::KnowledgeBase& kb,
                             int k);

struct SystemEval {
    eval::MetricReport report;
    std::vector<std::string> responses;
    std::vector<std::vector<retriever::RetrievalResult>> retrievals;
};

// Greedy inference over every turn of the given dialogues: retrieve, annotate
// (never adding a negative entity), generate, score. ks are the Recall@K
// cutoffs for the report.
SystemEval run_inference(const RetrieveFn& retrieve, const gen::Generator& g,
                         const std::vector<const dialogue::Dialogue*>& dialogues,
                         const kb::KnowledgeBase& kb, metaknow::RenderMode mode,
                         metaknow::Thresholds thresholds, const std::vector<int>& ks);

// ---- the joint training loop -----------------------------------------------

struct StepLog {
    int step = 0;
    double loss_nll = 0.0;
    double loss_mml = 0.0;
    double loss_ctr = 0.0;
    double loss_total = 0.0;
    double val_entity_f1 = -1.0;  // -1 = not evaluated at this step
    double val_recall = -1.0;
};

struct TrainResult {
    std::vector<StepLog> log;
    int best_step = -1;
    double best_val_f1 = -1.0;
    double final_val_f1 = -1.0;
    double final_val_recall = -1.0;
    int train_examples = 0;
};

void write_log_csv(std::ostream& os, const std::vector<StepLog>& log);

// Optimizes the "ret." and "gen." parameter groups jointly on the train
// split. Per optimizer step: sample batch_size * grad_accum_steps turns,
// retrieve top-K against the periodically rebuilt index, annotate meta
// knowledge (appending the negative entity when enabled), accumulate the
// weighted loss gradient, clip per group and apply Adam with linear decay.
// The best validation Entity F1 snapshot is restored into the store at the
// end. Deterministic per seed. Throws on non-finite loss, naming the step.
TrainResult train(ad::ParameterStore& store, retriever::DualEncoder& enc, gen::Generator& g,
                  const std::vector<dialogue::Dialogue>& dialogues, const kb::KnowledgeBase& kb,
                  const TrainConfig& cfg, std::ostream* log_stream = nullptr);

}  // namespace mktod::train
