#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <doctest.h>

#include "mktod/generator.hpp"
#include "mktod/optim.hpp"

#include "fd_check.hpp"

using namespace mktod;

namespace {

struct Fixture {
    kb::KnowledgeBase kb = kb::KnowledgeBase::from_entities(
        {
            {"r1", {{"name", "Pizza Hut"}, {"area", "centre"}, {"food", "italian"}}},
            {"r2", {{"name", "Curry Prince"}, {"area", "east"}, {"food", "indian"}}},
        },
        "name");
    text::Vocab vocab = text::Vocab::build(
        {"i want cheap food in the centre", "pizza hut is a nice place in the centre",
         "curry prince serves indian food in the east", "name area food italian indian",
         "the top recalled with high middle low confidence existed in history newly"},
        1);
};

metaknow::AnnotatedEntity annotated(int index, int rank, const std::string& rendering) {
    metaknow::AnnotatedEntity a;
    a.entity_index = index;
    a.meta = {rank, metaknow::Confidence::kMid, metaknow::Cooccur::kNew, false};
    a.rendering = rendering;
    return a;
}

// Plain-double replay of the full forward pass: embedding lookup, recurrent
// encoder, attentive decoder, shared-embedding logits, log-softmax picks.
double oracle_log_likelihood(const ad::ParameterStore& store, int d,
                             const std::vector<int>& input_ids,
                             const std::vector<int>& response_ids) {
    const auto& embed = store.get("gen.embed").values();
    const auto& enc_wx = store.get("gen.enc.wx").values();
    const auto& enc_wh = store.get("gen.enc.wh").values();
    const auto& enc_b = store.get("gen.enc.b").values();
    const auto& dec_wx = store.get("gen.dec.wx").values();
    const auto& dec_wh = store.get("gen.dec.wh").values();
    const auto& dec_b = store.get("gen.dec.b").values();
    const auto& wq = store.get("gen.attn.wq").values();
    const auto& out_w = store.get("gen.out.w").values();
    const auto& out_b = store.get("gen.out.b").values();
    const int vocab_size = store.get("gen.embed").shape()[0];

    auto matvec = [&](const std::vector<double>& v, const std::vector<double>& w, int rows,
                      int cols) {
        std::vector<double> out(static_cast<std::size_t>(cols), 0.0);
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < cols; ++j) {
                out[static_cast<std::size_t>(j)] +=
                    v[static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(i * cols + j)];
            }
        }
        return out;
    };

    const int t_len = static_cast<int>(input_ids.size());
    std::vector<std::vector<double>> memory;
    std::vector<double> h(static_cast<std::size_t>(d), 0.0);
    for (int t = 0; t < t_len; ++t) {
        std::vector<double> row(embed.begin() + input_ids[static_cast<std::size_t>(t)] * d,
                                embed.begin() + (input_ids[static_cast<std::size_t>(t)] + 1) * d);
        auto xp = matvec(row, enc_wx, d, d);
        auto hp = matvec(h, enc_wh, d, d);
        for (int j = 0; j < d; ++j) {
            h[static_cast<std::size_t>(j)] =
                std::tanh(xp[static_cast<std::size_t>(j)] + hp[static_cast<std::size_t>(j)] +
                          enc_b[static_cast<std::size_t>(j)]);
        }
        std::vector<double> m(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) {
            m[static_cast<std::size_t>(j)] =
                h[static_cast<std::size_t>(j)] + row[static_cast<std::size_t>(j)];
        }
        memory.push_back(m);
    }

    std::vector<int> dec_inputs(response_ids.size());
    dec_inputs[0] = text::kBosId;
    for (std::size_t j = 1; j < response_ids.size(); ++j) dec_inputs[j] = response_ids[j - 1];

    double total = 0.0;
    std::vector<double> s(static_cast<std::size_t>(d), 0.0);
    for (std::size_t j = 0; j < response_ids.size(); ++j) {
        std::vector<double> row(embed.begin() + dec_inputs[j] * d,
                                embed.begin() + (dec_inputs[j] + 1) * d);
        auto xp = matvec(row, dec_wx, d, d);
        auto sp = matvec(s, dec_wh, d, d);
        for (int i = 0; i < d; ++i) {
            s[static_cast<std::size_t>(i)] =
                std::tanh(xp[static_cast<std::size_t>(i)] + sp[static_cast<std::size_t>(i)] +
                          dec_b[static_cast<std::size_t>(i)]);
        }
        auto q = matvec(s, wq, d, d);
        std::vector<double> scores(static_cast<std::size_t>(t_len), 0.0);
        for (int t = 0; t < t_len; ++t) {
            for (int i = 0; i < d; ++i) {
                scores[static_cast<std::size_t>(t)] += memory[static_cast<std::size_t>(t)]
                                                             [static_cast<std::size_t>(i)] *
                                                       q[static_cast<std::size_t>(i)];
            }
            scores[static_cast<std::size_t>(t)] /= std::sqrt(static_cast<double>(d));
        }
        double mx = *std::max_element(scores.begin(), scores.end());
        double z = 0.0;
        std::vector<double> attn(scores.size());
        for (std::size_t t = 0; t < scores.size(); ++t) {
            attn[t] = std::exp(scores[t] - mx);
            z += attn[t];
        }
        for (auto& a : attn) a /= z;
        std::vector<double> ctx(static_cast<std::size_t>(d), 0.0);
        for (int t = 0; t < t_len; ++t) {
            for (int i = 0; i < d; ++i) {
                ctx[static_cast<std::size_t>(i)] +=
                    attn[static_cast<std::size_t>(t)] *
                    memory[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
            }
        }
        std::vector<double> cat(s);
        cat.insert(cat.end(), ctx.begin(), ctx.end());
        auto op = matvec(cat, out_w, 2 * d, d);
        std::vector<double> o(static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i) {
            o[static_cast<std::size_t>(i)] =
                std::tanh(op[static_cast<std::size_t>(i)] + out_b[static_cast<std::size_t>(i)]) +
                ctx[static_cast<std::size_t>(i)];
        }
        std::vector<double> logits(static_cast<std::size_t>(vocab_size), 0.0);
        for (int v = 0; v < vocab_size; ++v) {
            for (int i = 0; i < d; ++i) {
                logits[static_cast<std::size_t>(v)] +=
                    o[static_cast<std::size_t>(i)] * embed[static_cast<std::size_t>(v * d + i)];
            }
        }
        double lmx = *std::max_element(logits.begin(), logits.end());
        double lz = 0.0;
        for (double l : logits) lz += std::exp(l - lmx);
        const double lse = lmx + std::log(lz);
        total += logits[static_cast<std::size_t>(response_ids[j])] - lse;
    }
    return total;
}

}  // namespace

TEST_CASE("log likelihood matches a hand-rolled forward replay") {
    Fixture f;
    ad::ParameterStore store(41);
    gen::Generator g(store, f.vocab, {.hidden_dim = 6});
    const std::string context = "i want cheap food in the centre";
    const auto entities = std::vector<metaknow::AnnotatedEntity>{
        annotated(0, 1, "<1th-entity> <mid-confidence> <new-entity>")};
    const auto r = g.encode_response("pizza hut is a nice place in the centre");

    const auto ll = g.log_likelihood(context, entities, f.kb, r);
    const auto input_ids = g.build_input(context, entities, f.kb);
    const double expected = oracle_log_likelihood(store, 6, input_ids, r);
    CHECK(ll.item() == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("identical embedding rows force a uniform output distribution") {
    Fixture f;
    ad::ParameterStore store(42);
    gen::Generator g(store, f.vocab, {.hidden_dim = 5});
    auto embed = store.get("gen.embed");
    std::fill(embed.values().begin(), embed.values().end(), 0.1);

    const auto r = g.encode_response("pizza hut");
    const auto ll = g.log_likelihood("hello there", {}, f.kb, r).item();
    const double expected = static_cast<double>(r.size()) * std::log(1.0 / f.vocab.size());
    CHECK(ll == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("per-step distributions are proper") {
    Fixture f;
    ad::ParameterStore store(43);
    gen::Generator g(store, f.vocab, {.hidden_dim = 8});
    const auto r = g.encode_response("curry prince serves indian food");
    const auto input = g.build_input("i want indian food", {annotated(1, 1, "<1th-entity>")}, f.kb);
    auto rows = g.step_log_probs(input, r);
    REQUIRE(rows.shape()[0] == static_cast<int>(r.size()));
    REQUIRE(rows.shape()[1] == f.vocab.size());
    for (int j = 0; j < rows.shape()[0]; ++j) {
        double mass = 0.0;
        for (int v = 0; v < rows.shape()[1]; ++v) {
            mass += std::exp(rows.values()[static_cast<std::size_t>(j * rows.shape()[1] + v)]);
        }
        CHECK(mass == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("likelihood is a log probability") {
    Fixture f;
    ad::ParameterStore store(44);
    gen::Generator g(store, f.vocab, {.hidden_dim = 6});
    for (const char* resp : {"pizza hut", "the centre", "indian food in the east"}) {
        const double ll = g.log_likelihood("hi", {}, f.kb, g.encode_response(resp)).item();
        CHECK(std::isfinite(ll));
        CHECK(ll < 0.0);
        CHECK(std::exp(ll) <= 1.0);
        CHECK(std::exp(ll) > 0.0);
    }
}

TEST_CASE("gradients pass finite-difference checks on a micro model") {
    Fixture f;
    ad::ParameterStore store(45);
    gen::Generator g(store, f.vocab, {.hidden_dim = 4});
    const std::string context = "cheap food";
    const auto entities = std::vector<metaknow::AnnotatedEntity>{annotated(0, 1, "<1th-entity>")};
    const auto r = g.encode_response("pizza hut");
    auto build = [&]() { return g.log_likelihood(context, entities, f.kb, r); };
    for (const char* name : {"gen.embed", "gen.enc.wh", "gen.dec.wx", "gen.attn.wq", "gen.out.w",
                             "gen.out.b"}) {
        store.zero_grads();
        CHECK_MESSAGE(fd::max_rel_err(store.get(name), build) < 1e-4, name);
    }
}

TEST_CASE("response contract errors") {
    Fixture f;
    ad::ParameterStore store(46);
    gen::Generator g(store, f.vocab, {.hidden_dim = 4});
    CHECK_THROWS_AS(g.log_likelihood("hi", {}, f.kb, {}), std::invalid_argument);
    const std::vector<int> no_eos = {f.vocab.id("pizza"), f.vocab.id("hut")};
    CHECK_THROWS_AS(g.log_likelihood("hi", {}, f.kb, no_eos), std::invalid_argument);
}

TEST_CASE("encode_response appends eos and respects the cap") {
    Fixture f;
    ad::ParameterStore store(47);
    gen::Generator g(store, f.vocab, {.hidden_dim = 4, .max_output_tokens = 6});
    auto short_r = g.encode_response("pizza hut");
    REQUIRE(short_r.size() == 3);
    CHECK(short_r.back() == text::kEosId);

    auto long_r = g.encode_response("curry prince serves indian food in the east centre");
    CHECK(long_r.size() == 6);
    CHECK(long_r.back() == text::kEosId);
}

TEST_CASE("build_input layout: context, separator, ranked entities") {
    Fixture f;
    ad::ParameterStore store(48);
    gen::Generator g(store, f.vocab, {.hidden_dim = 4});
    const std::string context = "i want cheap food";
    const auto ids = g.build_input(
        context,
        {annotated(1, 1, "<1th-entity> <high-confidence> <new-entity>"),
         annotated(0, 2, "<2th-entity> <low-confidence> <old-entity>")},
        f.kb);

    const auto ctx_ids = f.vocab.encode(context);
    REQUIRE(ids.size() > ctx_ids.size());
    for (std::size_t i = 0; i < ctx_ids.size(); ++i) CHECK(ids[i] == ctx_ids[i]);
    CHECK(ids[ctx_ids.size()] == text::kSepId);

    // First entity after SEP is rank 1 (r2), rendering tokens first.
    std::size_t p = ctx_ids.size() + 1;
    CHECK(ids[p] == f.vocab.id("<1th-entity>"));
    CHECK(ids[p + 1] == f.vocab.id("<high-confidence>"));
    CHECK(ids[p + 2] == f.vocab.id("<new-entity>"));
    const auto flat_r2 = f.vocab.encode(kb::flatten_entity(f.kb.entity(1)));
    for (std::size_t i = 0; i < flat_r2.size(); ++i) CHECK(ids[p + 3 + i] == flat_r2[i]);

    // Entity without a knowledge-base row contributes only its rendering.
    metaknow::AnnotatedEntity bare;
    bare.entity_index = -1;
    bare.rendering = "<other-entity>";
    const auto bare_ids = g.build_input(context, {bare}, f.kb);
    CHECK(bare_ids.size() == ctx_ids.size() + 2);
    CHECK(bare_ids.back() == f.vocab.id("<other-entity>"));
}

TEST_CASE("build_input truncates context tail and entity head") {
    Fixture f;
    ad::ParameterStore store(49);
    gen::Generator g(store, f.vocab, {.hidden_dim = 4, .max_context_tokens = 3,
                                      .max_entity_tokens = 2});
    const auto ids =
        g.build_input("pizza hut is a nice place", {annotated(0, 1, "<1th-entity>")}, f.kb);
    const auto full_ctx = f.vocab.encode("pizza hut is a nice place");
    // Last 3 context tokens survive.
    CHECK(ids[0] == full_ctx[full_ctx.size() - 3]);
    CHECK(ids[1] == full_ctx[full_ctx.size() - 2]);
    CHECK(ids[2] == full_ctx[full_ctx.size() - 1]);
    CHECK(ids[3] == text::kSepId);
    CHECK(ids[4] == f.vocab.id("<1th-entity>"));
    // Entity body capped to its first 2 tokens.
    const auto flat = f.vocab.encode(kb::flatten_entity(f.kb.entity(0)));
    REQUIRE(ids.size() == 7);
    CHECK(ids[5] == flat[0]);
    CHECK(ids[6] == flat[1]);
}

TEST_CASE("duplicated entity changes the generator input") {
    Fixture f;
    ad::ParameterStore store(50);
    gen::Generator g(store, f.vocab, {.hidden_dim = 4});
    auto e = annotated(0, 1, "<1th-entity>");
    const auto one = g.build_input("hello", {e}, f.kb);
    const auto two = g.build_input("hello", {e, e}, f.kb);
    CHECK(two.size() > one.size());
}

TEST_CASE("greedy decoding is deterministic and honours max_len") {
    Fixture f;
    ad::ParameterStore store(51);
    gen::Generator g(store, f.vocab, {.hidden_dim = 8});
    const auto entities = std::vector<metaknow::AnnotatedEntity>{annotated(0, 1, "<1th-entity>")};
    const auto a = g.generate("i want cheap food", entities, f.kb);
    const auto b = g.generate("i want cheap food", entities, f.kb);
    CHECK(a == b);
    CHECK(a.size() <= 64);

    const auto one = g.generate("i want cheap food", entities, f.kb, 1);
    CHECK(one.size() == 1);
}

TEST_CASE("a few optimizer steps overfit one example") {
    Fixture f;
    ad::ParameterStore store(52);
    gen::Generator g(store, f.vocab, {.hidden_dim = 12});
    const std::string context = "i want cheap food in the centre";
    const auto entities = std::vector<metaknow::AnnotatedEntity>{
        annotated(0, 1, "<1th-entity> <high-confidence> <new-entity>")};
    const auto r = g.encode_response("pizza hut is a nice place");

    optim::Adam adam(store, {.lr = 0.05, .weight_decay = 0.0, .clip_norm = 100.0}, "gen.");
    const double before = -g.log_likelihood(context, entities, f.kb, r).item();
    for (int step = 0; step < 30; ++step) {
        store.zero_grads();
        auto loss = ad::neg(g.log_likelihood(context, entities, f.kb, r));
        ad::backward(loss);
        adam.step();
    }
    const double after = -g.log_likelihood(context, entities, f.kb, r).item();
    CHECK(after < before * 0.5);
    CHECK(after < 3.0);
}

TEST_CASE("chat prompt rendering") {
    Fixture f;
    std::vector<metaknow::AnnotatedEntity> entities = {
        annotated(0, 1, "It has high possibility that this entity is top-1 important. This is a "
                        "new entity.")};
    gen::Demonstration demo{"i want italian food",
                            {annotated(0, 1, "It has high possibility that this entity is top-1 "
                                             "important. This is a new entity.")},
                            "pizza hut is a nice italian place"};

    const auto prefix_text =
        gen::render_llm_prompt("any cheap place ?", entities, f.kb, {demo},
                               gen::PromptStyle::kPrefix);
    CHECK(prefix_text.find("Each record of knowledge base is accompanied by three tags.") !=
          std::string::npos);
    CHECK(prefix_text.find("Example 1:") != std::string::npos);
    CHECK(prefix_text.find("pizza hut is a nice italian place") != std::string::npos);
    CHECK(prefix_text.find("any cheap place ?") != std::string::npos);
    CHECK(prefix_text.rfind("Response:") == prefix_text.size() - 9);

    const auto no_demo =
        gen::render_llm_prompt("any cheap place ?", entities, f.kb, {}, gen::PromptStyle::kPrefix);
    CHECK(no_demo.find("Example") == std::string::npos);
    CHECK(no_demo.find("any cheap place ?") != std::string::npos);

    const auto prompt_text =
        gen::render_llm_prompt("any cheap place ?", entities, f.kb, {demo},
                               gen::PromptStyle::kPrompt);
    CHECK(prompt_text.find("It has high possibility that this entity is top-1 important.") !=
          std::string::npos);
    CHECK(prompt_text !=
          gen::render_llm_prompt("any cheap place ?", entities, f.kb, {demo, demo},
                                 gen::PromptStyle::kPrompt));
    CHECK(prompt_text == gen::render_llm_prompt("any cheap place ?", entities, f.kb, {demo},
                                                gen::PromptStyle::kPrompt));
}

TEST_CASE("empty entity list yields a context-only likelihood") {
    Fixture f;
    ad::ParameterStore store(53);
    gen::Generator g(store, f.vocab, {.hidden_dim = 6});
    const auto r = g.encode_response("pizza hut");
    const double with_none = g.log_likelihood("hello", {}, f.kb, r).item();
    const double with_one =
        g.log_likelihood("hello", {annotated(0, 1, "<1th-entity>")}, f.kb, r).item();
    CHECK(std::isfinite(with_none));
    CHECK(with_none != with_one);
}
