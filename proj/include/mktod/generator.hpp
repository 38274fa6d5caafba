#pragma once

#include <string>
#include <vector>

#include "mktod/autodiff.hpp"
#include "mktod/kb.hpp"
#include "mktod/metaknow.hpp"
#include "mktod/text.hpp"

// Tiny attention-based encoder-decoder over token ids. One set of weights
// serves both set-conditioned likelihood p(r | c, E) and single-entity
// likelihood p(r | c, e); the entity list may be empty, giving p(r | c).
// The output projection is tied to the embedding table and attention memory
// rows carry residual token embeddings, so copying an input token only
// requires attending to it.
namespace mktod::gen {

struct GeneratorConfig {
    int hidden_dim = 64;
    int max_context_tokens = 200;
    int max_entity_tokens = 100;
    int max_output_tokens = 64;
};

class Generator {
public:
    // Registers parameters under the "gen." prefix (re-using existing slots
    // on reload, so a loaded checkpoint is never re-initialized).
    Generator(ad::ParameterStore& store, const text::Vocab& vocab, GeneratorConfig cfg = {});

    // Encoder input: tail-truncated context ids, SEP, then per retrieved
    // entity its meta rendering followed by the head-truncated flattened
    // description. Entity order = retrieval rank order.
    std::vector<int> build_input(const std::string& context,
                                 const std::vector<metaknow::AnnotatedEntity>& entities,
                                 const kb::KnowledgeBase& kb) const;

    // Encoded response ending in EOS, capped at max_output_tokens.
    std::vector<int> encode_response(const std::string& response) const;

    // [|r|, V] log distribution for each teacher-forced step; response_ids
    // must be non-empty and end with EOS.
    ad::Tensor step_log_probs(const std::vector<int>& input_ids,
                              const std::vector<int>& response_ids) const;

    // Sum over positions of log p(r_j | r_<j, c, entities); scalar tensor,
    // differentiable with respect to generator parameters only.
    ad::Tensor log_likelihood(const std::string& context,
                              const std::vector<metaknow::AnnotatedEntity>& entities,
                              const kb::KnowledgeBase& kb,
                              const std::vector<int>& response_ids) const;

    // Greedy argmax decode until EOS or the token cap; returned sequence
    // excludes BOS and includes EOS when one was emitted. max_len <= 0 means
    // the configured max_output_tokens.
    std::vector<int> generate(const std::string& context,
                              const std::vector<metaknow::AnnotatedEntity>& entities,
                              const kb::KnowledgeBase& kb, int max_len = 0) const;

    const GeneratorConfig& config() const { return cfg_; }
    const text::Vocab& vocab() const { return vocab_; }

private:
    ad::Tensor encode_sequence(const std::vector<int>& input_ids) const;
    std::vector<ad::Tensor> decode_rows(const ad::Tensor& memory,
                                        const std::vector<int>& response_ids) const;

    ad::ParameterStore& store_;
    const text::Vocab& vocab_;
    GeneratorConfig cfg_;
    ad::Tensor embed_, enc_wx_, enc_wh_, enc_b_;
    ad::Tensor dec_wx_, dec_wh_, dec_b_;
    ad::Tensor attn_wq_, out_w_, out_b_;
};

struct Demonstration {
    std::string context;
    std::vector<metaknow::AnnotatedEntity> entities;
    std::string response;
};

enum class PromptStyle { kPrefix, kPrompt };

// Full in-context-learning text for a chat-style external generator: a
// system explanation of the annotation tags, worked demonstrations, then the
// current context with its annotated entities. Pure text rendering.
std::string render_llm_prompt(const std::string& context,
                              const std::vector<metaknow::AnnotatedEntity>& entities,
                              const kb::KnowledgeBase& kb,
                              const std::vector<Demonstration>& demonstrations, PromptStyle style);

}  // namespace mktod::gen
