#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mktod/autodiff.hpp"
#include "mktod/dialogue.hpp"
#include "mktod/kb.hpp"
#include "mktod/text.hpp"

// Dense dual-encoder retrieval with distant-supervision pretraining, plus the
// rule-based baseline retriever zoo used in the misalignment analysis.
namespace mktod::retriever {

struct RetrieverConfig {
    int embed_dim = 64;
    int max_input_tokens = 128;
    bool cosine = false;  // default scoring is the unnormalized dot product
};

struct RetrievalResult {
    std::string entity_id;
    int entity_index = -1;
    double score = 0.0;
    double prob = 0.0;  // softmax over the retrieved set only
    int rank = 0;       // 1-based
};

// Context/entity encoders: embedding table, mean pool, linear projection,
// tanh; each side has its own parameters under "ret.ctx." / "ret.ent.".
class DualEncoder {
public:
    DualEncoder(const text::Vocab& vocab, ad::ParameterStore& store, RetrieverConfig cfg);

    // Differentiable paths (recorded on the graph).
    ad::Tensor encode_context(const std::string& context_text) const;
    ad::Tensor encode_entity(const kb::Entity& e) const;

    // Graph-free paths; values are bitwise identical to the tensor paths.
    std::vector<double> encode_context_frozen(const std::string& context_text) const;
    std::vector<double> encode_entity_frozen(const kb::Entity& e) const;

    int dim() const { return cfg_.embed_dim; }
    const RetrieverConfig& config() const { return cfg_; }
    const text::Vocab& vocab() const { return *vocab_; }

    static double score(const double* h_c, const double* h_e, int d, bool cosine);

private:
    std::vector<int> context_ids(const std::string& context_text) const;
    std::vector<int> entity_ids(const kb::Entity& e) const;
    ad::Tensor encode_ids(const std::vector<int>& ids, const ad::Tensor& embed,
                          const ad::Tensor& w, const ad::Tensor& b) const;
    std::vector<double> encode_ids_frozen(const std::vector<int>& ids, const ad::Tensor& embed,
                                          const ad::Tensor& w, const ad::Tensor& b) const;

    const text::Vocab* vocab_;
    RetrieverConfig cfg_;
    ad::Tensor ctx_embed_, ctx_w_, ctx_b_;
    ad::Tensor ent_embed_, ent_w_, ent_b_;
};

// Frozen entity vectors, row i = entities[i]; rebuilt (never mutated) when
// parameters move. Row encoding parallelizes across entities.
struct EntityIndex {
    std::int64_t build_step = -1;
    int dim = 0;
    std::vector<double> vectors;  // [B, dim] row-major

    int size() const { return dim > 0 ? static_cast<int>(vectors.size()) / dim : 0; }
    const double* row(int i) const { return vectors.data() + static_cast<std::size_t>(i) * dim; }
};

EntityIndex build_entity_index(const DualEncoder& encoder, const kb::KnowledgeBase& kb,
                               std::int64_t build_step);

// Raw scores of a context vector against every index row.
std::vector<double> score_all(const std::vector<double>& h_c, const EntityIndex& index,
                              bool cosine = false);

// Exact top-K by score; ties broken by entity list order; probs are the
// softmax over exactly these K scores.
std::vector<RetrievalResult> retrieve_topk(const std::vector<double>& h_c,
                                           const EntityIndex& index, const kb::KnowledgeBase& kb,
                                           int k, bool cosine = false);

// ---- distant-supervision pretraining --------------------------------------

// Entity with the most of its values mentioned in context + response; ties go
// to the lowest entity index; -1 when nothing matches.
int pseudo_positive(const std::string& context, const std::string& response,
                    const kb::KnowledgeBase& kb);

struct PretrainConfig {
    int steps = 200;
    int batch_size = 8;  // >= 2
    double lr = 1e-4;
    double weight_decay = 0.01;
    double clip_norm = 0.01;
    bool linear_decay = true;
    std::uint64_t seed = 13;
    int log_every = 50;
};

struct PretrainStats {
    int steps_run = 0;
    int examples = 0;
    int skipped_turns = 0;
    double first_loss = 0.0;
    double last_loss = 0.0;
};

// In-batch contrastive pretraining against pseudo-positive entities; trains
// the "ret." parameter group of the store.
PretrainStats pretrain_retriever(const std::vector<dialogue::Dialogue>& dialogues,
                                 const kb::KnowledgeBase& kb, DualEncoder& encoder,
                                 ad::ParameterStore& store, const PretrainConfig& cfg,
                                 std::ostream* log = nullptr);

// ---- baseline retriever zoo ------------------------------------------------

// Okapi BM25 with k1=1.2, b=0.75 over flatten_entity documents and a
// smoothed, always-positive idf: ln(1 + (N - df + 0.5) / (df + 0.5)).
// Query terms are deduplicated; term frequency acts on the document side.
class Bm25Index {
public:
    explicit Bm25Index(const kb::KnowledgeBase& kb, double k1 = 1.2, double b = 0.75);
    std::vector<double> scores(const std::string& query) const;
    std::vector<RetrievalResult> topk(const std::string& query, int k) const;

private:
    const kb::KnowledgeBase* kb_;
    double k1_, b_;
    double avgdl_ = 0.0;
    std::vector<std::vector<std::pair<std::string, int>>> docs_;  // sorted term -> tf
    std::vector<int> doc_len_;
    std::vector<std::pair<std::string, double>> idf_;  // sorted term -> idf
};

// Count of each entity's attribute values mentioned in the context; ties by
// entity order.
std::vector<RetrievalResult> frequency_retrieve(const std::string& context,
                                                const kb::KnowledgeBase& kb, int k);

// Gold entity first with rank 1 and prob 0.9 (high confidence); remaining
// entities keep list order and share prob 0.1 (low confidence).
std::vector<RetrievalResult> oracle_retrieve(const std::vector<std::string>& gold_ids,
                                             const kb::KnowledgeBase& kb, int k);

std::vector<RetrievalResult> random_retrieve(ad::Rng& rng, const kb::KnowledgeBase& kb, int k);

}  // namespace mktod::retriever
