#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <doctest.h>

#include "mktod/training.hpp"

using namespace mktod;

namespace {

text::Vocab task_vocab(const dialogue::SynthResult& task) {
    std::vector<std::string> corpus;
    for (const auto& d : task.dialogues) {
        for (const auto& t : d.turns) {
            corpus.push_back(t.user);
            corpus.push_back(t.system);
        }
    }
    for (const auto& e : task.kb.entities()) corpus.push_back(kb::flatten_entity(e));
    return text::Vocab::build(corpus, 1);
}

struct Fixture {
    dialogue::SynthResult task = dialogue::make_synthetic_task(
        {.n_entities = 4, .n_attributes = 2, .n_dialogues = 12, .distractor_rate = 0, .seed = 7});
    text::Vocab vocab = task_vocab(task);
    ad::ParameterStore store{21};
    retriever::DualEncoder enc{vocab, store, {.embed_dim = 10, .max_input_tokens = 64}};
    gen::Generator g{store, vocab,
                     {.hidden_dim = 10,
                      .max_context_tokens = 48,
                      .max_entity_tokens = 24,
                      .max_output_tokens = 24}};

    std::string context;
    std::vector<int> response_ids;
    std::vector<metaknow::AnnotatedEntity> annotated;

    Fixture() {
        const auto* d = dialogue::filter_split(task.dialogues, "train").front();
        context = dialogue::context_text(*d, 0);
        response_ids = g.encode_response(d->turns[0].system);
        auto index = retriever::build_entity_index(enc, task.kb, 0);
        auto results = retriever::retrieve_topk(enc.encode_context_frozen(context), index,
                                                task.kb, 2, false);
        annotated = metaknow::annotate(results, context, task.kb, {},
                                       metaknow::RenderMode::kPrefix);
    }
};

double group_grad_linf(const ad::ParameterStore& store, const std::string& prefix) {
    double m = 0.0;
    for (const auto& [name, t] : store) {
        if (name.rfind(prefix, 0) != 0) continue;
        for (double gv : t.node()->grad) m = std::max(m, std::abs(gv));
    }
    return m;
}

std::map<std::string, std::vector<double>> grad_snapshot(const ad::ParameterStore& store) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& [name, t] : store) out[name] = t.node()->grad;
    return out;
}

}  // namespace

TEST_CASE("meta mode names round-trip") {
    for (auto m : {train::MetaMode::kNone, train::MetaMode::kPrefix, train::MetaMode::kPrompt,
                   train::MetaMode::kCtr}) {
        CHECK(train::parse_meta_mode(train::meta_mode_name(m)) == m);
    }
    CHECK_THROWS_AS(train::parse_meta_mode("verbose"), std::invalid_argument);

    CHECK(train::render_mode_for(train::MetaMode::kPrefix) == metaknow::RenderMode::kPrefix);
    CHECK(train::render_mode_for(train::MetaMode::kPrompt) == metaknow::RenderMode::kPromptSmall);
    CHECK(train::render_mode_for(train::MetaMode::kNone) == metaknow::RenderMode::kNone);
    CHECK(train::render_mode_for(train::MetaMode::kCtr) == metaknow::RenderMode::kNone);
}

TEST_CASE("nll loss is the negated sequence log-likelihood") {
    Fixture f;
    const auto ll = f.g.log_likelihood(f.context, f.annotated, f.task.kb, f.response_ids);
    const auto loss = train::loss_nll(f.g, f.context, f.annotated, f.task.kb, f.response_ids);
    CHECK(loss.item() == -ll.item());
    CHECK(loss.item() > 0.0);
    CHECK_THROWS_AS(train::loss_nll(f.g, f.context, {}, f.task.kb, f.response_ids),
                    std::invalid_argument);
}

TEST_CASE("single-entity likelihoods condition on one entity at a time") {
    Fixture f;
    auto lls = train::single_entity_log_likelihoods(f.g, f.context, f.annotated, f.task.kb,
                                                    f.response_ids, true);
    REQUIRE(lls.size() == f.annotated.size());
    for (std::size_t i = 0; i < lls.size(); ++i) {
        const auto direct =
            f.g.log_likelihood(f.context, {f.annotated[i]}, f.task.kb, f.response_ids);
        CHECK(lls[i].item() == direct.item());
    }

    REQUIRE(!f.annotated[0].rendering.empty());
    auto stripped = train::single_entity_log_likelihoods(f.g, f.context, f.annotated, f.task.kb,
                                                         f.response_ids, false);
    auto bare = f.annotated[0];
    bare.rendering.clear();
    const auto direct_bare = f.g.log_likelihood(f.context, {bare}, f.task.kb, f.response_ids);
    CHECK(stripped[0].item() == direct_bare.item());
    CHECK(stripped[0].item() != lls[0].item());
}

TEST_CASE("marginal likelihood with one candidate reduces to plain nll") {
    Fixture f;
    const std::vector<metaknow::AnnotatedEntity> single{f.annotated[0]};
    const auto nll = train::loss_nll(f.g, f.context, single, f.task.kb, f.response_ids);
    const auto mml =
        train::loss_mml(f.g, f.enc, f.context, single, f.task.kb, f.response_ids, true, false);
    CHECK(mml.item() == doctest::Approx(nll.item()).epsilon(1e-12));

    const auto ll = f.g.log_likelihood(f.context, single, f.task.kb, f.response_ids);
    const auto parts = train::mml_from_parts(ad::Tensor({1}, {0.37}), {ll});
    CHECK(parts.item() == -ll.item());
}

TEST_CASE("marginal likelihood hand-computed values") {
    // Equal scores give weights (1/2, 1/2); with candidate probabilities
    // (1/2, 1/4) the marginal is 3/8.
    {
        ad::Tensor scores({2}, {0.3, 0.3});
        std::vector<ad::Tensor> lls{ad::Tensor::scalar(std::log(0.5)),
                                    ad::Tensor::scalar(std::log(0.25))};
        const auto loss = train::mml_from_parts(scores, lls);
        CHECK(loss.item() == doctest::Approx(-std::log(0.375)).epsilon(1e-12));
    }
    // Scores (log 3, 0) give weights (3/4, 1/4); marginal 0.4375.
    {
        ad::Tensor scores({2}, {std::log(3.0), 0.0});
        std::vector<ad::Tensor> lls{ad::Tensor::scalar(std::log(0.5)),
                                    ad::Tensor::scalar(std::log(0.25))};
        const auto loss = train::mml_from_parts(scores, lls);
        CHECK(loss.item() == doctest::Approx(-std::log(0.4375)).epsilon(1e-12));
    }
}

TEST_CASE("marginal likelihood bounds and invariances") {
    ad::Rng rng(423);
    for (int trial = 0; trial < 100; ++trial) {
        const int k = 1 + static_cast<int>(rng.next_int(5));
        std::vector<double> svals, lvals;
        for (int i = 0; i < k; ++i) {
            svals.push_back(rng.uniform(-2.0, 2.0));
            lvals.push_back(rng.uniform(-5.0, -0.1));
        }
        std::vector<ad::Tensor> lls;
        for (double v : lvals) lls.push_back(ad::Tensor::scalar(v));
        const double loss = train::mml_from_parts(ad::Tensor({k}, svals), lls).item();

        // The marginal is a convex combination of candidate likelihoods, so
        // the loss lies between the best and worst per-candidate nll.
        const double lo = -*std::max_element(lvals.begin(), lvals.end());
        const double hi = -*std::min_element(lvals.begin(), lvals.end());
        CHECK(loss >= lo - 1e-12);
        CHECK(loss <= hi + 1e-12);

        auto shifted = svals;
        for (auto& v : shifted) v += 3.7;
        const double loss_shift = train::mml_from_parts(ad::Tensor({k}, shifted), lls).item();
        CHECK(loss_shift == doctest::Approx(loss).epsilon(1e-9));

        if (k > 1) {
            auto rs = svals;
            auto rl = lls;
            std::rotate(rs.begin(), rs.begin() + 1, rs.end());
            std::rotate(rl.begin(), rl.begin() + 1, rl.end());
            const double loss_rot = train::mml_from_parts(ad::Tensor({k}, rs), rl).item();
            CHECK(loss_rot == doctest::Approx(loss).epsilon(1e-12));
        }
    }

    CHECK_THROWS_AS(train::mml_from_parts(ad::Tensor({1}, {0.0}), {}), std::invalid_argument);
    CHECK_THROWS_AS(train::mml_from_parts(ad::Tensor({2}, {0.0, 0.0}),
                                          {ad::Tensor::scalar(-1.0)}),
                    std::invalid_argument);
}

TEST_CASE("loss terms route gradient to the intended parameter groups") {
    Fixture f;

    f.store.zero_grads();
    ad::backward(train::loss_nll(f.g, f.context, f.annotated, f.task.kb, f.response_ids));
    CHECK(group_grad_linf(f.store, "gen.") > 0.0);
    CHECK(group_grad_linf(f.store, "ret.") == 0.0);

    f.store.zero_grads();
    ad::backward(train::loss_mml(f.g, f.enc, f.context, f.annotated, f.task.kb, f.response_ids,
                                 true, false));
    CHECK(group_grad_linf(f.store, "gen.") > 0.0);
    CHECK(group_grad_linf(f.store, "ret.") > 0.0);

    // Detaching the likelihood factors leaves only the retriever trainable.
    f.store.zero_grads();
    ad::backward(train::loss_mml(f.g, f.enc, f.context, f.annotated, f.task.kb, f.response_ids,
                                 true, true));
    CHECK(group_grad_linf(f.store, "gen.") == 0.0);
    CHECK(group_grad_linf(f.store, "ret.") > 0.0);
}

TEST_CASE("doubling the loss weight doubles every gradient") {
    Fixture f;
    const auto loss = train::loss_nll(f.g, f.context, f.annotated, f.task.kb, f.response_ids);

    f.store.zero_grads();
    ad::backward(loss);
    const auto base = grad_snapshot(f.store);

    f.store.zero_grads();
    ad::backward(ad::scale(loss, 2.0));
    const auto doubled = grad_snapshot(f.store);

    for (const auto& [name, gv] : base) {
        REQUIRE(doubled.at(name).size() == gv.size());
        for (std::size_t i = 0; i < gv.size(); ++i) {
            CHECK(doubled.at(name)[i] == 2.0 * gv[i]);
        }
    }
}

TEST_CASE("contrastive loss values") {
    // Margin already satisfied: the positive beats the baseline by far more
    // than the margin, so the hinge is exactly zero.
    {
        const auto loss = train::ctr_from_parts({ad::Tensor::scalar(-1.0)},
                                                ad::Tensor::scalar(-10.0), 5, 0.01);
        CHECK(loss.item() == 0.0);
    }
    // Ties pay exactly the margin per positive.
    {
        const auto loss = train::ctr_from_parts(
            {ad::Tensor::scalar(-5.0), ad::Tensor::scalar(-5.0)}, ad::Tensor::scalar(-5.0), 5,
            0.01);
        CHECK(loss.item() == doctest::Approx(0.02).epsilon(1e-12));
    }

    ad::Rng rng(91);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 1 + static_cast<int>(rng.next_int(4));
        const int len = 1 + static_cast<int>(rng.next_int(6));
        const double margin = trial % 2 == 0 ? 0.01 : 0.1;
        const double baseline = rng.uniform(-8.0, -0.5);
        std::vector<ad::Tensor> pos;
        double expected = 0.0;
        for (int i = 0; i < n; ++i) {
            const double ll = rng.uniform(-8.0, -0.5);
            pos.push_back(ad::Tensor::scalar(ll));
            expected += std::max(0.0, baseline / len - ll / len + margin);
        }
        const auto loss =
            train::ctr_from_parts(pos, ad::Tensor::scalar(baseline), len, margin);
        CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-12));
        CHECK(loss.item() >= 0.0);
    }

    CHECK_THROWS_AS(train::ctr_from_parts({}, ad::Tensor::scalar(-1.0), 3, 0.01),
                    std::invalid_argument);
    CHECK_THROWS_AS(train::ctr_from_parts({ad::Tensor::scalar(-1.0)}, ad::Tensor::scalar(-1.0),
                                          0, 0.01),
                    std::invalid_argument);
}

TEST_CASE("contrastive wrapper matches a by-hand evaluation") {
    Fixture f;
    const double margin = 0.25;
    const auto loss =
        train::loss_ctr(f.g, f.context, f.annotated, f.task.kb, f.response_ids, margin);

    const double baseline =
        f.g.log_likelihood(f.context, {}, f.task.kb, f.response_ids).item();
    const int len = static_cast<int>(f.response_ids.size());
    double expected = 0.0;
    for (const auto& e : f.annotated) {
        const double ll = f.g.log_likelihood(f.context, {e}, f.task.kb, f.response_ids).item();
        expected += std::max(0.0, baseline / len - ll / len + margin);
    }
    CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("dense retrieval callback matches direct top-k search") {
    Fixture f;
    const auto index = retriever::build_entity_index(f.enc, f.task.kb, 0);
    const auto fn = train::dense_retrieve_fn(f.enc, index, f.task.kb, 2);
    const auto via_fn = fn(f.context, f.task.dialogues[0].turns[0]);
    const auto direct = retriever::retrieve_topk(f.enc.encode_context_frozen(f.context), index,
                                                 f.task.kb, 2, false);
    REQUIRE(via_fn.size() == direct.size());
    for (std::size_t i = 0; i < direct.size(); ++i) {
        CHECK(via_fn[i].entity_id == direct[i].entity_id);
        CHECK(via_fn[i].rank == direct[i].rank);
        CHECK(via_fn[i].score == direct[i].score);
    }
}

TEST_CASE("inference over gold retrievals yields perfect recall") {
    Fixture f;
    train::RetrieveFn oracle = [&](const std::string&, const dialogue::Turn& turn) {
        std::vector<retriever::RetrievalResult> out;
        for (const auto& id : turn.gold_entity_ids) {
            retriever::RetrievalResult r;
            r.entity_id = id;
            r.entity_index = f.task.kb.index_of(id);
            r.score = 1.0;
            r.prob = 1.0 / static_cast<double>(turn.gold_entity_ids.size());
            r.rank = static_cast<int>(out.size()) + 1;
            out.push_back(std::move(r));
        }
        return out;
    };

    const auto test_split = dialogue::filter_split(f.task.dialogues, "test");
    REQUIRE(!test_split.empty());
    std::size_t n_turns = 0;
    for (const auto* d : test_split) n_turns += d->turns.size();

    const auto ev = train::run_inference(oracle, f.g, test_split, f.task.kb,
                                         metaknow::RenderMode::kPrefix, {}, {1});
    CHECK(ev.responses.size() == n_turns);
    CHECK(ev.retrievals.size() == n_turns);
    CHECK(ev.report.turns.size() == n_turns);
    CHECK(ev.report.recall_at_k.at(1) == 1.0);
    CHECK(ev.report.turns[0].dialogue_id == test_split[0]->id);
    CHECK(ev.report.turns[0].turn_index == 0);
    for (const auto& row : ev.report.turns) {
        if (row.has_gold_entities) CHECK(row.retrieval_hit);
    }

    CHECK_THROWS_AS(train::run_inference(oracle, f.g, {}, f.task.kb,
                                         metaknow::RenderMode::kPrefix, {}, {1}),
                    std::invalid_argument);
}

TEST_CASE("csv log format") {
    train::StepLog a;
    a.step = 1;
    a.loss_nll = 1.5;
    a.loss_mml = 2.25;
    train::StepLog b;
    b.step = 2;
    b.loss_nll = 0.5;
    b.loss_mml = 0.25;
    b.val_entity_f1 = 0.5;
    b.val_recall = 0.75;
    std::ostringstream os;
    train::write_log_csv(os, {a, b});
    CHECK(os.str() ==
          "step,loss_nll,loss_mml,loss_ctr,val_entity_f1,val_recall_at_k\n"
          "1,1.5,2.25,0,,\n"
          "2,0.5,0.25,0,0.5,0.75\n");
}

TEST_CASE("training config validation") {
    Fixture f;
    train::TrainConfig base;
    base.steps = 0;
    base.top_k = 2;

    auto expect_throws = [&](auto mutate) {
        auto cfg = base;
        mutate(cfg);
        CHECK_THROWS_AS(train::train(f.store, f.enc, f.g, f.task.dialogues, f.task.kb, cfg),
                        std::invalid_argument);
    };
    expect_throws([&](train::TrainConfig& c) { c.top_k = f.task.kb.size() + 1; });
    expect_throws([](train::TrainConfig& c) { c.top_k = 0; });
    expect_throws([](train::TrainConfig& c) { c.margin = 0.0; });
    expect_throws([](train::TrainConfig& c) { c.alpha = -1.0; });
    expect_throws([](train::TrainConfig& c) { c.steps = -1; });
    expect_throws([](train::TrainConfig& c) { c.batch_size = 0; });
    expect_throws([](train::TrainConfig& c) { c.grad_accum_steps = 0; });
    expect_throws([](train::TrainConfig& c) { c.positive_set_size = 0; });
    expect_throws([](train::TrainConfig& c) { c.index_rebuild_every = 0; });

    auto cfg = base;
    cfg.alpha = 0.0;
    cfg.use_mml = false;
    cfg.meta_mode = train::MetaMode::kNone;
    CHECK_THROWS_WITH_AS(train::train(f.store, f.enc, f.g, f.task.dialogues, f.task.kb, cfg),
                         "no loss terms enabled", std::invalid_argument);
}

TEST_CASE("zero training steps leave parameters untouched") {
    Fixture f;
    const auto before = f.store.snapshot();
    train::TrainConfig cfg;
    cfg.steps = 0;
    cfg.top_k = 2;
    const auto result = train::train(f.store, f.enc, f.g, f.task.dialogues, f.task.kb, cfg);
    CHECK(f.store.snapshot() == before);
    CHECK(result.log.empty());
    CHECK(result.best_step == -1);
    CHECK(result.train_examples == 0);
}

TEST_CASE("micro training run is deterministic") {
    auto run = [] {
        Fixture f;
        train::TrainConfig cfg;
        cfg.steps = 3;
        cfg.batch_size = 2;
        cfg.grad_accum_steps = 2;
        cfg.top_k = 2;
        cfg.retriever_lr = 1e-3;
        cfg.generator_lr = 1e-3;
        cfg.log_every = 1;
        cfg.eval_every = 2;
        cfg.index_rebuild_every = 2;
        std::ostringstream os;
        const auto result =
            train::train(f.store, f.enc, f.g, f.task.dialogues, f.task.kb, cfg, &os);
        return std::tuple(f.store.snapshot(), os.str(), result);
    };

    const auto [snap1, csv1, res1] = run();
    const auto [snap2, csv2, res2] = run();
    CHECK(snap1 == snap2);
    CHECK(csv1 == csv2);
    REQUIRE(res1.log.size() == res2.log.size());
    for (std::size_t i = 0; i < res1.log.size(); ++i) {
        CHECK(res1.log[i].loss_total == res2.log[i].loss_total);
        CHECK(res1.log[i].val_entity_f1 == res2.log[i].val_entity_f1);
    }

    CHECK(res1.train_examples >= 10);
    REQUIRE(res1.log.size() == 3);
    CHECK(csv1.rfind("step,loss_nll,loss_mml,loss_ctr,val_entity_f1,val_recall_at_k\n", 0) == 0);
    for (const auto& row : res1.log) {
        CHECK(std::isfinite(row.loss_total));
        CHECK(row.loss_nll > 0.0);
        CHECK(row.loss_total ==
              doctest::Approx(row.loss_nll + row.loss_mml).epsilon(1e-9));
    }
    // eval_every=2 evaluates at step 2 and at the final step.
    CHECK(res1.log[0].val_entity_f1 == -1.0);
    CHECK(res1.log[1].val_entity_f1 >= 0.0);
    CHECK(res1.log[2].val_entity_f1 >= 0.0);
    CHECK(res1.best_step >= 2);
    CHECK(res1.final_val_f1 == res1.best_val_f1);
    CHECK(res1.final_val_recall >= 0.0);
}

TEST_CASE("contrastive mode trains with all three loss terms") {
    Fixture f;
    train::TrainConfig cfg;
    cfg.steps = 1;
    cfg.batch_size = 2;
    cfg.grad_accum_steps = 1;
    cfg.top_k = 2;
    cfg.meta_mode = train::MetaMode::kCtr;
    cfg.log_every = 1;
    cfg.eval_every = 0;  // final-step validation only
    const auto result = train::train(f.store, f.enc, f.g, f.task.dialogues, f.task.kb, cfg);
    REQUIRE(result.log.size() == 1);
    const auto& row = result.log[0];
    CHECK(row.loss_ctr >= 0.0);
    CHECK(row.loss_total ==
          doctest::Approx(row.loss_nll + row.loss_mml + row.loss_ctr).epsilon(1e-9));
    CHECK(row.val_entity_f1 >= 0.0);
}

TEST_CASE("poisoned parameters fail fast naming the step") {
    Fixture f;
    f.store.get("gen.enc.wx").values()[0] = std::numeric_limits<double>::quiet_NaN();
    train::TrainConfig cfg;
    cfg.steps = 1;
    cfg.batch_size = 1;
    cfg.grad_accum_steps = 1;
    cfg.top_k = 2;
    try {
        train::train(f.store, f.enc, f.g, f.task.dialogues, f.task.kb, cfg);
        FAIL("expected training to diverge");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("diverged") != std::string::npos);
        CHECK(msg.find("at step 1") != std::string::npos);
    }
}
