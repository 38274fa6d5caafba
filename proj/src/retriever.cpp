#include "mktod/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>

#include "mktod/kernels.hpp"
#include "mktod/optim.hpp"

namespace mktod::retriever {

namespace {

std::vector<double> softmax_plain(const std::vector<double>& x) {
    double m = x[0];
    for (double v : x) m = std::max(m, v);
    std::vector<double> out(x.size());
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - m);
        z += out[i];
    }
    for (auto& v : out) v /= z;
    return out;
}

// Shared by every retriever: order candidate indices by (score desc, entity
// order asc), cut to k, attach softmax probs over the kept scores.
std::vector<RetrievalResult> rank_and_cut(const std::vector<double>& scores,
                                          const kb::KnowledgeBase& kb, int k) {
    const int b = static_cast<int>(scores.size());
    if (k < 1 || k > b) {
        throw std::invalid_argument("retrieve: K=" + std::to_string(k) +
                                    " outside [1," + std::to_string(b) + "]");
    }
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int c) {
        if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(c)]) {
            return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(c)];
        }
        return a < c;
    });
    std::vector<double> kept(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) kept[static_cast<std::size_t>(i)] = scores[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    const auto probs = softmax_plain(kept);

    std::vector<RetrievalResult> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        const int idx = order[static_cast<std::size_t>(i)];
        out.push_back({kb.entity(idx).id, idx, kept[static_cast<std::size_t>(i)],
                       probs[static_cast<std::size_t>(i)], i + 1});
    }
    return out;
}

}  // namespace

// ---- dual encoder ---------------------------------------------------------

DualEncoder::DualEncoder(const text::Vocab& vocab, ad::ParameterStore& store, RetrieverConfig cfg)
    : vocab_(&vocab), cfg_(cfg) {
    const int v = vocab.size();
    const int d = cfg_.embed_dim;
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
    ctx_embed_ = param("ret.ctx.embed", {v, d}, d);
    ctx_w_ = param("ret.ctx.w", {d, d}, d);
    ctx_b_ = zeros("ret.ctx.b", {d});
    ent_embed_ = param("ret.ent.embed", {v, d}, d);
    ent_w_ = param("ret.ent.w", {d, d}, d);
    ent_b_ = zeros("ret.ent.b", {d});
}

std::vector<int> DualEncoder::context_ids(const std::string& context_text) const {
    return text::truncate_tail(vocab_->encode(context_text), cfg_.max_input_tokens);
}

std::vector<int> DualEncoder::entity_ids(const kb::Entity& e) const {
    return text::truncate_head(vocab_->encode(kb::flatten_entity(e)), cfg_.max_input_tokens);
}

ad::Tensor DualEncoder::encode_ids(const std::vector<int>& ids, const ad::Tensor& embed,
                                   const ad::Tensor& w, const ad::Tensor& b) const {
    if (ids.empty()) throw std::invalid_argument("encoder input has no tokens");
    auto pooled = ad::mean_rows(ad::gather_rows(embed, ids));
    auto projected = ad::add_rowwise(ad::matmul(ad::reshape(pooled, {1, cfg_.embed_dim}), w), b);
    return ad::slice_row(ad::tanh_op(projected), 0);
}

std::vector<double> DualEncoder::encode_ids_frozen(const std::vector<int>& ids,
                                                   const ad::Tensor& embed, const ad::Tensor& w,
                                                   const ad::Tensor& b) const {
    if (ids.empty()) throw std::invalid_argument("encoder input has no tokens");
    const int d = cfg_.embed_dim;
    // Mirrors the tensor path operation for operation so the two stay
    // bitwise identical.
    std::vector<double> pooled(static_cast<std::size_t>(d), 0.0);
    for (int id : ids) {
        const double* row = embed.values().data() + static_cast<std::size_t>(id) * d;
        for (int j = 0; j < d; ++j) pooled[static_cast<std::size_t>(j)] += row[j];
    }
    const double n_rows = static_cast<double>(ids.size());
    for (auto& x : pooled) x /= n_rows;

    std::vector<double> projected(static_cast<std::size_t>(d));
    kernels::matmul_nn(pooled.data(), w.values().data(), projected.data(), 1, d, d);
    for (int j = 0; j < d; ++j) {
        projected[static_cast<std::size_t>(j)] =
            std::tanh(projected[static_cast<std::size_t>(j)] + b.values()[static_cast<std::size_t>(j)]);
    }
    return projected;
}

ad::Tensor DualEncoder::encode_context(const std::string& context_text) const {
    return encode_ids(context_ids(context_text), ctx_embed_, ctx_w_, ctx_b_);
}

ad::Tensor DualEncoder::encode_entity(const kb::Entity& e) const {
    return encode_ids(entity_ids(e), ent_embed_, ent_w_, ent_b_);
}

std::vector<double> DualEncoder::encode_context_frozen(const std::string& context_text) const {
    return encode_ids_frozen(context_ids(context_text), ctx_embed_, ctx_w_, ctx_b_);
}

std::vector<double> DualEncoder::encode_entity_frozen(const kb::Entity& e) const {
    return encode_ids_frozen(entity_ids(e), ent_embed_, ent_w_, ent_b_);
}

double DualEncoder::score(const double* h_c, const double* h_e, int d, bool cosine) {
    double dot = 0.0;
    for (int i = 0; i < d; ++i) dot += h_c[i] * h_e[i];
    if (!cosine) return dot;
    double nc = 0.0, ne = 0.0;
    for (int i = 0; i < d; ++i) {
        nc += h_c[i] * h_c[i];
        ne += h_e[i] * h_e[i];
    }
    const double denom = std::sqrt(nc) * std::sqrt(ne);
    return denom > 0.0 ? dot / denom : 0.0;
}

// ---- entity index ---------------------------------------------------------

EntityIndex build_entity_index(const DualEncoder& encoder, const kb::KnowledgeBase& kb,
                               std::int64_t build_step) {
    EntityIndex index;
    index.build_step = build_step;
    index.dim = encoder.dim();
    index.vectors.assign(static_cast<std::size_t>(kb.size()) * encoder.dim(), 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled())
#endif
    for (int i = 0; i < kb.size(); ++i) {
        const auto h = encoder.encode_entity_frozen(kb.entity(i));
        std::copy(h.begin(), h.end(),
                  index.vectors.begin() + static_cast<std::size_t>(i) * index.dim);
    }
    return index;
}

std::vector<double> score_all(const std::vector<double>& h_c, const EntityIndex& index,
                              bool cosine) {
    if (static_cast<int>(h_c.size()) != index.dim) {
        throw std::invalid_argument("score_all: context width " + std::to_string(h_c.size()) +
                                    " vs index width " + std::to_string(index.dim));
    }
    std::vector<double> scores(static_cast<std::size_t>(index.size()));
    if (!cosine) {
        kernels::matmul_nt(index.vectors.data(), h_c.data(), scores.data(), index.size(),
                           index.dim, 1);
        return scores;
    }
    for (int i = 0; i < index.size(); ++i) {
        scores[static_cast<std::size_t>(i)] =
            DualEncoder::score(h_c.data(), index.row(i), index.dim, true);
    }
    return scores;
}

std::vector<RetrievalResult> retrieve_topk(const std::vector<double>& h_c,
                                           const EntityIndex& index, const kb::KnowledgeBase& kb,
                                           int k, bool cosine) {
    return rank_and_cut(score_all(h_c, index, cosine), kb, k);
}

// ---- distant-supervision pretraining --------------------------------------

int pseudo_positive(const std::string& context, const std::string& response,
                    const kb::KnowledgeBase& kb) {
    const auto mentions = kb::find_value_mentions(context + " " + response, kb);
    std::vector<int> counts(static_cast<std::size_t>(kb.size()), 0);
    for (const auto& m : mentions) ++counts[static_cast<std::size_t>(kb.index_of(m.entity_id))];
    int best = -1, best_count = 0;
    for (int i = 0; i < kb.size(); ++i) {
        if (counts[static_cast<std::size_t>(i)] > best_count) {
            best = i;
            best_count = counts[static_cast<std::size_t>(i)];
        }
    }
    return best;
}

PretrainStats pretrain_retriever(const std::vector<dialogue::Dialogue>& dialogues,
                                 const kb::KnowledgeBase& kb, DualEncoder& encoder,
                                 ad::ParameterStore& store, const PretrainConfig& cfg,
                                 std::ostream* log) {
    if (cfg.batch_size < 2) {
        throw std::invalid_argument("pretrain: batch_size must be >= 2, got " +
                                    std::to_string(cfg.batch_size));
    }

    struct Example {
        std::string context;
        int positive;
    };
    std::vector<Example> examples;
    PretrainStats stats;
    for (const auto& d : dialogues) {
        for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
            std::string ctx = dialogue::context_text(d, t);
            const int pos = pseudo_positive(ctx, d.turns[static_cast<std::size_t>(t)].system, kb);
            if (pos < 0) {
                ++stats.skipped_turns;
                if (log) {
                    *log << "pretrain: skipping dialogue " << d.id << " turn " << t
                         << " (no value mentions)\n";
                }
                continue;
            }
            examples.push_back({std::move(ctx), pos});
        }
    }
    if (examples.empty()) throw std::runtime_error("pretrain: no turns with value mentions");
    stats.examples = static_cast<int>(examples.size());

    optim::AdamConfig opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    opt.clip_norm = cfg.clip_norm;
    opt.total_steps = cfg.linear_decay ? cfg.steps : 0;
    optim::Adam adam(store, opt, "ret.");

    ad::Rng rng(ad::mix_seed(cfg.seed, "pretrain.batch"));
    for (int step = 0; step < cfg.steps; ++step) {
        store.zero_grads();
        std::vector<ad::Tensor> ctx_rows, ent_rows;
        std::vector<int> targets;
        for (int i = 0; i < cfg.batch_size; ++i) {
            const auto& ex =
                examples[static_cast<std::size_t>(rng.next_int(static_cast<int>(examples.size())))];
            ctx_rows.push_back(encoder.encode_context(ex.context));
            ent_rows.push_back(encoder.encode_entity(kb.entity(ex.positive)));
            targets.push_back(i);
        }
        auto logits = ad::matmul_nt(ad::stack_rows(ctx_rows), ad::stack_rows(ent_rows));
        auto loss = ad::cross_entropy(logits, targets);
        ad::backward(loss);
        adam.step();

        if (step == 0) stats.first_loss = loss.item();
        stats.last_loss = loss.item();
        ++stats.steps_run;
        if (log && cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
            *log << "pretrain step " << (step + 1) << "/" << cfg.steps << " loss " << loss.item()
                 << "\n";
        }
    }
    return stats;
}

// ---- baseline retriever zoo ------------------------------------------------

Bm25Index::Bm25Index(const kb::KnowledgeBase& kb, double k1, double b)
    : kb_(&kb), k1_(k1), b_(b) {
    std::map<std::string, int> df;
    std::int64_t total_len = 0;
    for (const auto& e : kb.entities()) {
        const auto tokens = text::tokenize(kb::flatten_entity(e));
        doc_len_.push_back(static_cast<int>(tokens.size()));
        total_len += static_cast<std::int64_t>(tokens.size());
        std::map<std::string, int> tf;
        for (const auto& t : tokens) ++tf[t];
        for (const auto& [term, _] : tf) ++df[term];
        docs_.emplace_back(tf.begin(), tf.end());
    }
    avgdl_ = static_cast<double>(total_len) / kb.size();
    const double n = kb.size();
    for (const auto& [term, d] : df) {
        idf_.emplace_back(term, std::log(1.0 + (n - d + 0.5) / (d + 0.5)));
    }
}

std::vector<double> Bm25Index::scores(const std::string& query) const {
    std::set<std::string> terms;
    for (const auto& t : text::tokenize(query)) terms.insert(t);

    std::vector<double> out(docs_.size(), 0.0);
    for (const auto& term : terms) {
        const auto idf_it = std::lower_bound(
            idf_.begin(), idf_.end(), term,
            [](const auto& entry, const std::string& key) { return entry.first < key; });
        if (idf_it == idf_.end() || idf_it->first != term) continue;
        for (std::size_t d = 0; d < docs_.size(); ++d) {
            const auto& doc = docs_[d];
            const auto tf_it = std::lower_bound(
                doc.begin(), doc.end(), term,
                [](const auto& entry, const std::string& key) { return entry.first < key; });
            if (tf_it == doc.end() || tf_it->first != term) continue;
            const double tf = tf_it->second;
            const double norm = k1_ * (1.0 - b_ + b_ * doc_len_[d] / avgdl_);
            out[d] += idf_it->second * tf * (k1_ + 1.0) / (tf + norm);
        }
    }
    return out;
}

std::vector<RetrievalResult> Bm25Index::topk(const std::string& query, int k) const {
    return rank_and_cut(scores(query), *kb_, k);
}

std::vector<RetrievalResult> frequency_retrieve(const std::string& context,
                                                const kb::KnowledgeBase& kb, int k) {
    std::vector<double> counts(static_cast<std::size_t>(kb.size()), 0.0);
    for (const auto& m : kb::find_value_mentions(context, kb)) {
        counts[static_cast<std::size_t>(kb.index_of(m.entity_id))] += 1.0;
    }
    return rank_and_cut(counts, kb, k);
}

std::vector<RetrievalResult> oracle_retrieve(const std::vector<std::string>& gold_ids,
                                             const kb::KnowledgeBase& kb, int k) {
    if (gold_ids.empty()) throw std::invalid_argument("oracle retriever requires gold labels");
    if (k < 1 || k > kb.size()) {
        throw std::invalid_argument("retrieve: K=" + std::to_string(k) + " outside [1," +
                                    std::to_string(kb.size()) + "]");
    }
    std::vector<int> order;
    std::vector<bool> used(static_cast<std::size_t>(kb.size()), false);
    for (const auto& id : gold_ids) {
        const int idx = kb.index_of(id);
        if (idx < 0) throw std::invalid_argument("oracle retriever: unknown gold id '" + id + "'");
        if (!used[static_cast<std::size_t>(idx)]) {
            order.push_back(idx);
            used[static_cast<std::size_t>(idx)] = true;
        }
    }
    for (int i = 0; i < kb.size() && static_cast<int>(order.size()) < k; ++i) {
        if (!used[static_cast<std::size_t>(i)]) order.push_back(i);
    }

    std::vector<RetrievalResult> out;
    for (int i = 0; i < k; ++i) {
        const int idx = order[static_cast<std::size_t>(i)];
        RetrievalResult r;
        r.entity_id = kb.entity(idx).id;
        r.entity_index = idx;
        r.rank = i + 1;
        // Top-1 is pinned above the high-confidence threshold; the rest share
        // the remainder below the low-confidence threshold.
        r.score = i == 0 ? 1.0 : 0.0;
        r.prob = k == 1 ? 1.0 : (i == 0 ? 0.9 : 0.1 / (k - 1));
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<RetrievalResult> random_retrieve(ad::Rng& rng, const kb::KnowledgeBase& kb, int k) {
    if (k < 1 || k > kb.size()) {
        throw std::invalid_argument("retrieve: K=" + std::to_string(k) + " outside [1," +
                                    std::to_string(kb.size()) + "]");
    }
    std::vector<int> order(static_cast<std::size_t>(kb.size()));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<RetrievalResult> out;
    for (int i = 0; i < k; ++i) {
        const int idx = order[static_cast<std::size_t>(i)];
        out.push_back({kb.entity(idx).id, idx, 0.0, 1.0 / k, i + 1});
    }
    return out;
}

}  // namespace mktod::retriever
