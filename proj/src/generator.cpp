#include "mktod/generator.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mktod::gen {

namespace {

// v [n] * w [n,m] -> [m]
ad::Tensor rowmat(const ad::Tensor& v, const ad::Tensor& w) {
    const int n = v.shape()[0];
    return ad::slice_row(ad::matmul(ad::reshape(v, {1, n}), w), 0);
}

}  // namespace

Generator::Generator(ad::ParameterStore& store, const text::Vocab& vocab, GeneratorConfig cfg)
    : store_(store), vocab_(vocab), cfg_(cfg) {
    const int v = vocab.size();
    const int d = cfg_.hidden_dim;
    auto reuse = [&](const std::string& name, const std::vector<int>& shape) {
        auto t = store.get(name);
        if (t.shape() != shape) {
            throw std::invalid_argument("parameter " + name +
                                        " exists with a different shape; the stored model does "
                                        "not match the requested configuration");
        }
        return t;
    };
    auto param = [&](const std::string& name, std::vector<int> shape, int fan_in) {
        return store.has(name) ? reuse(name, shape) : store.add(name, std::move(shape), fan_in);
    };
    auto zeros = [&](const std::string& name, std::vector<int> shape) {
        return store.has(name) ? reuse(name, shape) : store.add_zeros(name, std::move(shape));
    };
    embed_ = param("gen.embed", {v, d}, d);
    enc_wx_ = param("gen.enc.wx", {d, d}, d);
    enc_wh_ = param("gen.enc.wh", {d, d}, d);
    enc_b_ = zeros("gen.enc.b", {d});
    dec_wx_ = param("gen.dec.wx", {d, d}, d);
    dec_wh_ = param("gen.dec.wh", {d, d}, d);
    dec_b_ = zeros("gen.dec.b", {d});
    attn_wq_ = param("gen.attn.wq", {d, d}, d);
    out_w_ = param("gen.out.w", {2 * d, d}, 2 * d);
    out_b_ = zeros("gen.out.b", {d});
}

std::vector<int> Generator::build_input(const std::string& context,
                                        const std::vector<metaknow::AnnotatedEntity>& entities,
                                        const kb::KnowledgeBase& kb) const {
    std::vector<int> ids = text::truncate_tail(vocab_.encode(context), cfg_.max_context_tokens);
    ids.push_back(text::kSepId);
    for (const auto& annotated : entities) {
        const auto rendering = vocab_.encode(annotated.rendering);
        ids.insert(ids.end(), rendering.begin(), rendering.end());
        if (annotated.entity_index >= 0) {
            const auto body = text::truncate_head(
                vocab_.encode(kb::flatten_entity(kb.entity(annotated.entity_index))),
                cfg_.max_entity_tokens);
            ids.insert(ids.end(), body.begin(), body.end());
        }
    }
    return ids;
}

std::vector<int> Generator::encode_response(const std::string& response) const {
    auto ids = text::truncate_head(vocab_.encode(response), cfg_.max_output_tokens - 1);
    ids.push_back(text::kEosId);
    return ids;
}

// Memory rows carry the raw token embedding on top of the recurrent state so
// attention can match tokens by content and the tied output projection can
// turn an attended token directly into its own logit.
ad::Tensor Generator::encode_sequence(const std::vector<int>& input_ids) const {
    const int d = cfg_.hidden_dim;
    auto e = ad::gather_rows(embed_, input_ids);
    auto x = ad::matmul(e, enc_wx_);
    ad::Tensor h = ad::Tensor::zeros({d});
    std::vector<ad::Tensor> states;
    states.reserve(input_ids.size());
    for (int t = 0; t < static_cast<int>(input_ids.size()); ++t) {
        h = ad::tanh_op(ad::add(ad::add(ad::slice_row(x, t), rowmat(h, enc_wh_)), enc_b_));
        states.push_back(ad::add(h, ad::slice_row(e, t)));
    }
    return ad::stack_rows(states);
}

std::vector<ad::Tensor> Generator::decode_rows(const ad::Tensor& memory,
                                               const std::vector<int>& response_ids) const {
    if (response_ids.empty()) throw std::invalid_argument("response is empty");
    if (response_ids.back() != text::kEosId) {
        throw std::invalid_argument("response does not end with <eos>");
    }
    const int d = cfg_.hidden_dim;
    const int steps = static_cast<int>(response_ids.size());
    const int mem_len = memory.shape()[0];
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<int> dec_inputs(response_ids.size());
    dec_inputs[0] = text::kBosId;
    for (int j = 1; j < steps; ++j) {
        dec_inputs[static_cast<std::size_t>(j)] = response_ids[static_cast<std::size_t>(j - 1)];
    }
    auto x = ad::matmul(ad::gather_rows(embed_, dec_inputs), dec_wx_);

    ad::Tensor s = ad::Tensor::zeros({d});
    std::vector<ad::Tensor> rows;
    rows.reserve(response_ids.size());
    for (int j = 0; j < steps; ++j) {
        s = ad::tanh_op(ad::add(ad::add(ad::slice_row(x, j), rowmat(s, dec_wh_)), dec_b_));
        auto q = rowmat(s, attn_wq_);
        auto scores =
            ad::scale(ad::reshape(ad::matmul_nt(memory, ad::reshape(q, {1, d})), {mem_len}),
                      attn_scale);
        auto attn = ad::softmax(scores);
        auto context_vec = ad::slice_row(ad::matmul(ad::reshape(attn, {1, mem_len}), memory), 0);
        auto o = ad::add(ad::tanh_op(ad::add(rowmat(ad::concat({s, context_vec}), out_w_), out_b_)),
                         context_vec);
        auto logits =
            ad::reshape(ad::matmul_nt(ad::reshape(o, {1, d}), embed_), {vocab_.size()});
        rows.push_back(ad::log_softmax(logits));
    }
    return rows;
}

ad::Tensor Generator::step_log_probs(const std::vector<int>& input_ids,
                                     const std::vector<int>& response_ids) const {
    return ad::stack_rows(decode_rows(encode_sequence(input_ids), response_ids));
}

ad::Tensor Generator::log_likelihood(const std::string& context,
                                     const std::vector<metaknow::AnnotatedEntity>& entities,
                                     const kb::KnowledgeBase& kb,
                                     const std::vector<int>& response_ids) const {
    const auto input_ids = build_input(context, entities, kb);
    const auto rows = decode_rows(encode_sequence(input_ids), response_ids);
    std::vector<ad::Tensor> picks;
    picks.reserve(rows.size());
    for (std::size_t j = 0; j < rows.size(); ++j) {
        picks.push_back(ad::pick(rows[j], response_ids[j]));
    }
    return ad::sum(ad::concat(picks));
}

std::vector<int> Generator::generate(const std::string& context,
                                     const std::vector<metaknow::AnnotatedEntity>& entities,
                                     const kb::KnowledgeBase& kb, int max_len) const {
    if (max_len <= 0) max_len = cfg_.max_output_tokens;
    const int d = cfg_.hidden_dim;
    const auto input_ids = build_input(context, entities, kb);
    auto memory = encode_sequence(input_ids);
    const int mem_len = memory.shape()[0];
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<int> out;
    ad::Tensor s = ad::Tensor::zeros({d});
    int prev = text::kBosId;
    while (static_cast<int>(out.size()) < max_len) {
        auto x = ad::slice_row(ad::matmul(ad::gather_rows(embed_, {prev}), dec_wx_), 0);
        s = ad::tanh_op(ad::add(ad::add(x, rowmat(s, dec_wh_)), dec_b_));
        auto q = rowmat(s, attn_wq_);
        auto scores =
            ad::scale(ad::reshape(ad::matmul_nt(memory, ad::reshape(q, {1, d})), {mem_len}),
                      attn_scale);
        auto attn = ad::softmax(scores);
        auto context_vec = ad::slice_row(ad::matmul(ad::reshape(attn, {1, mem_len}), memory), 0);
        auto o = ad::add(ad::tanh_op(ad::add(rowmat(ad::concat({s, context_vec}), out_w_), out_b_)),
                         context_vec);
        auto logits = ad::matmul_nt(ad::reshape(o, {1, d}), embed_);
        const auto& vals = logits.values();
        int best = 0;
        for (int v = 1; v < vocab_.size(); ++v) {
            if (vals[static_cast<std::size_t>(v)] > vals[static_cast<std::size_t>(best)]) best = v;
        }
        out.push_back(best);
        if (best == text::kEosId) break;
        prev = best;
    }
    return out;
}

// ---- in-context-learning prompt -------------------------------------------

namespace {

const std::string kPromptStyleExplanation =
    "Each record of knowledge base is accompanied by a short description. It states how possible "
    "the entity is important, for example \"It has high possibility that this entity is top-1 "
    "important.\", and whether the entity appeared in the dialogue history before (\"This entity "
    "has appeared before.\") or is newly recalled (\"This is a new entity.\").";

void append_block(std::ostringstream& os, const std::string& context,
                  const std::vector<metaknow::AnnotatedEntity>& entities,
                  const kb::KnowledgeBase& kb) {
    os << "Knowledge:\n";
    if (entities.empty()) {
        os << "(no entity retrieved)\n";
    }
    for (const auto& annotated : entities) {
        os << "- " << annotated.rendering;
        if (annotated.entity_index >= 0) {
            os << " " << kb::flatten_entity(kb.entity(annotated.entity_index));
        }
        os << "\n";
    }
    os << "Dialogue:\n" << context << "\n";
}

}  // namespace

std::string render_llm_prompt(const std::string& context,
                              const std::vector<metaknow::AnnotatedEntity>& entities,
                              const kb::KnowledgeBase& kb,
                              const std::vector<Demonstration>& demonstrations,
                              PromptStyle style) {
    std::ostringstream os;
    os << (style == PromptStyle::kPrefix ? metaknow::llm_tag_explanation()
                                         : kPromptStyleExplanation)
       << "\n\n";
    int n = 0;
    for (const auto& demo : demonstrations) {
        os << "Example " << ++n << ":\n";
        append_block(os, demo.context, demo.entities, kb);
        os << "Response: " << demo.response << "\n\n";
    }
    append_block(os, context, entities, kb);
    os << "Response:";
    return os.str();
}

}  // namespace mktod::gen
