#include "mktod/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mktod/analysis.hpp"
#include "mktod/config.hpp"

namespace mktod::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kConfidenceNames[] = {"low", "mid", "high"};

kb::KnowledgeBase load_kb(const config::RunConfig& cfg) {
    if (cfg.data.kb.empty()) throw std::invalid_argument("--kb is required");
    return kb::KnowledgeBase::load(cfg.data.kb, cfg.data.name_attribute);
}

std::vector<dialogue::Dialogue> load_dialogues(const config::RunConfig& cfg,
                                               const kb::KnowledgeBase& kb) {
    if (cfg.data.dialogues.empty()) throw std::invalid_argument("--dialogues is required");
    return dialogue::load_dialogues(cfg.data.dialogues, kb);
}

text::Vocab load_vocab(const config::RunConfig& cfg) {
    if (cfg.data.vocab.empty()) throw std::invalid_argument("--vocab is required");
    return text::Vocab::load(cfg.data.vocab);
}

std::vector<const dialogue::Dialogue*> split_or_throw(
    const std::vector<dialogue::Dialogue>& dialogues, const std::string& split) {
    auto out = dialogue::filter_split(dialogues, split);
    if (out.empty()) throw std::invalid_argument("no dialogues in split: " + split);
    return out;
}

// The resolved configuration is written into every run directory.
void ensure_out_dir(const config::RunConfig& cfg) {
    fs::create_directories(cfg.data.out_dir);
    config::save_config(cfg, cfg.data.out_dir + "/config.json");
}

std::ofstream open_out_file(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    return out;
}

text::Vocab build_task_vocab(const kb::KnowledgeBase& kb,
                             const std::vector<dialogue::Dialogue>& dialogues) {
    std::vector<std::string> corpus;
    for (const auto& d : dialogues) {
        for (const auto& t : d.turns) {
            corpus.push_back(t.user);
            corpus.push_back(t.system);
        }
    }
    for (const auto& e : kb.entities()) corpus.push_back(kb::flatten_entity(e));
    return text::Vocab::build(corpus, 1);
}

// Parameter store plus the two models registered on it, warm-started from a
// checkpoint prefix when one is given. The vocab must outlive the system.
struct System {
    ad::ParameterStore store;
    std::unique_ptr<retriever::DualEncoder> enc;
    std::unique_ptr<gen::Generator> g;

    System(const config::RunConfig& cfg, const text::Vocab& vocab, const std::string& checkpoint)
        : store(cfg.training.seed) {
        if (!checkpoint.empty()) ad::load_checkpoint(store, checkpoint);
        enc = std::make_unique<retriever::DualEncoder>(vocab, store, cfg.retriever);
        g = std::make_unique<gen::Generator>(store, vocab, cfg.generator);
    }
};

metaknow::RenderMode mode_for_cfg(const config::RunConfig& cfg) {
    return train::render_mode_for(cfg.training.meta_mode);
}

struct OwnedRetriever {
    train::RetrieveFn fn;
    std::shared_ptr<void> state;  // keeps captured resources alive
};

OwnedRetriever make_retriever(const std::string& name, const config::RunConfig& cfg,
                              const kb::KnowledgeBase& kb) {
    const int k = cfg.training.top_k;
    if (name == "dense") {
        struct DenseState {
            text::Vocab vocab;
            System sys;
            retriever::EntityIndex index;
            DenseState(const config::RunConfig& cfg, const kb::KnowledgeBase& kb)
                : vocab(load_vocab(cfg)),
                  sys(cfg, vocab, cfg.data.checkpoint),
                  index(retriever::build_entity_index(*sys.enc, kb, 0)) {}
        };
        auto state = std::make_shared<DenseState>(cfg, kb);
        return {[state, &kb, k](const std::string& context, const dialogue::Turn&) {
                    return retriever::retrieve_topk(state->sys.enc->encode_context_frozen(context),
                                                    state->index, kb, k,
                                                    state->sys.enc->config().cosine);
                },
                state};
    }
    if (name == "bm25") {
        auto bm25 = std::make_shared<retriever::Bm25Index>(kb);
        return {[bm25, k](const std::string& context, const dialogue::Turn&) {
                    return bm25->topk(context, k);
                },
                bm25};
    }
    if (name == "frequency") {
        return {[&kb, k](const std::string& context, const dialogue::Turn&) {
                    return retriever::frequency_retrieve(context, kb, k);
                },
                nullptr};
    }
    if (name == "oracle") {
        return {[&kb, k](const std::string&, const dialogue::Turn& turn) {
                    return retriever::oracle_retrieve(turn.gold_entity_ids, kb, k);
                },
                nullptr};
    }
    if (name == "random") {
        auto rng = std::make_shared<ad::Rng>(ad::mix_seed(cfg.training.seed, "cli.random"));
        return {[rng, &kb, k](const std::string&, const dialogue::Turn&) {
                    return retriever::random_retrieve(*rng, kb, k);
                },
                rng};
    }
    throw std::invalid_argument("unknown retriever: " + name);
}

json metrics_to_json(const eval::MetricReport& report) {
    json j;
    j["bleu"] = report.bleu;
    j["entity"] = {{"precision", report.entity.precision}, {"recall", report.entity.recall},
                   {"f1", report.entity.f1},               {"tp", report.entity.tp},
                   {"fp", report.entity.fp},               {"fn", report.entity.fn}};
    j["recall_at_k"] = json::object();
    for (const auto& [k, v] : report.recall_at_k) j["recall_at_k"][std::to_string(k)] = v;
    j["turns"] = json::array();
    for (const auto& t : report.turns) {
        j["turns"].push_back({{"dialogue_id", t.dialogue_id},
                              {"turn_index", t.turn_index},
                              {"predicted_values", t.predicted_values},
                              {"gold_values", t.gold_values},
                              {"tp", t.tp},
                              {"fp", t.fp},
                              {"fn", t.fn},
                              {"has_gold_entities", t.has_gold_entities},
                              {"retrieval_hit", t.retrieval_hit}});
    }
    return j;
}

void print_report(std::ostream& out, const eval::MetricReport& report) {
    out << "turns             " << report.turns.size() << '\n';
    out << "bleu              " << report.bleu << '\n';
    out << "entity_precision  " << report.entity.precision << '\n';
    out << "entity_recall     " << report.entity.recall << '\n';
    out << "entity_f1         " << report.entity.f1 << '\n';
    for (const auto& [k, v] : report.recall_at_k) {
        out << "recall@" << k << "          " << v << '\n';
    }
}

// ---- subcommands -----------------------------------------------------------

void run_synth(const config::RunConfig& cfg, std::ostream& out) {
    const auto task = dialogue::make_synthetic_task(cfg.synth);
    fs::create_directories(cfg.data.out_dir);
    task.kb.save(cfg.data.out_dir + "/kb.json");
    dialogue::save_dialogues(cfg.data.out_dir + "/dialogues.jsonl", task.dialogues);
    build_task_vocab(task.kb, task.dialogues).save(cfg.data.out_dir + "/vocab.txt");
    config::save_config(cfg, cfg.data.out_dir + "/config.json");
    std::size_t turns = 0;
    for (const auto& d : task.dialogues) turns += d.turns.size();
    out << "wrote " << task.kb.size() << " entities, " << task.dialogues.size()
        << " dialogues (" << turns << " turns) to " << cfg.data.out_dir << '\n';
}

void run_ingest(const config::RunConfig& cfg, std::ostream& out) {
    const auto kb = load_kb(cfg);
    const auto dialogues = load_dialogues(cfg, kb);
    std::map<std::string, int> split_dialogues;
    std::map<std::string, std::size_t> split_turns;
    for (const auto& d : dialogues) {
        ++split_dialogues[d.split];
        split_turns[d.split] += d.turns.size();
    }
    out << "entities          " << kb.size() << '\n';
    out << "attributes        " << kb.attribute_names().size() << '\n';
    out << "distinct_values   " << kb.value_vocabulary().size() << '\n';
    for (const auto& [split, n] : split_dialogues) {
        out << "dialogues[" << split << "]  " << n << " (" << split_turns[split] << " turns)\n";
    }
}

void run_pretrain(const config::RunConfig& cfg, std::ostream& out) {
    const auto kb = load_kb(cfg);
    const auto dialogues = load_dialogues(cfg, kb);
    const auto vocab = load_vocab(cfg);
    ad::ParameterStore store(cfg.pretrain.seed);
    if (!cfg.data.checkpoint.empty()) ad::load_checkpoint(store, cfg.data.checkpoint);
    retriever::DualEncoder enc(vocab, store, cfg.retriever);
    // Registered so the checkpoint carries a complete, warm-startable store.
    gen::Generator g(store, vocab, cfg.generator);
    ensure_out_dir(cfg);
    auto log = open_out_file(cfg.data.out_dir + "/pretrain_log.csv");
    const auto stats = retriever::pretrain_retriever(dialogues, kb, enc, store, cfg.pretrain, &log);
    ad::save_checkpoint(store, cfg.data.out_dir + "/ckpt");
    out << "pretrained for " << stats.steps_run << " steps on " << stats.examples
        << " pseudo-labeled turns (" << stats.skipped_turns << " skipped)\n";
    out << "loss " << stats.first_loss << " -> " << stats.last_loss << '\n';
    out << "checkpoint " << cfg.data.out_dir << "/ckpt\n";
}

void run_train(const config::RunConfig& cfg, std::ostream& out) {
    const auto kb = load_kb(cfg);
    const auto dialogues = load_dialogues(cfg, kb);
    const auto vocab = load_vocab(cfg);
    System sys(cfg, vocab, cfg.data.checkpoint);
    ensure_out_dir(cfg);
    auto log = open_out_file(cfg.data.out_dir + "/train_log.csv");
    const auto result =
        train::train(sys.store, *sys.enc, *sys.g, dialogues, kb, cfg.training, &log);
    ad::save_checkpoint(sys.store, cfg.data.out_dir + "/ckpt");
    json summary;
    summary["steps"] = cfg.training.steps;
    summary["train_examples"] = result.train_examples;
    summary["best_step"] = result.best_step >= 0 ? json(result.best_step) : json(nullptr);
    summary["best_val_f1"] = result.best_val_f1 >= 0.0 ? json(result.best_val_f1) : json(nullptr);
    summary["final_val_f1"] =
        result.final_val_f1 >= 0.0 ? json(result.final_val_f1) : json(nullptr);
    summary["final_val_recall"] =
        result.final_val_recall >= 0.0 ? json(result.final_val_recall) : json(nullptr);
    open_out_file(cfg.data.out_dir + "/train_summary.json") << summary.dump(2) << '\n';
    out << "trained " << cfg.training.steps << " steps on " << result.train_examples
        << " turns\n";
    if (result.best_step >= 0) {
        out << "best val entity_f1 " << result.best_val_f1 << " at step " << result.best_step
            << " (restored)\n";
    }
    out << "checkpoint " << cfg.data.out_dir << "/ckpt\n";
}

void run_eval(const config::RunConfig& cfg, std::ostream& out) {
    const auto kb = load_kb(cfg);
    const auto dialogues = load_dialogues(cfg, kb);
    const auto vocab = load_vocab(cfg);
    System sys(cfg, vocab, cfg.data.checkpoint);
    const auto split = split_or_throw(dialogues, cfg.data.split);
    const auto index = retriever::build_entity_index(*sys.enc, kb, 0);
    const auto fn = train::dense_retrieve_fn(*sys.enc, index, kb, cfg.training.top_k);
    const auto ev = train::run_inference(fn, *sys.g, split, kb, mode_for_cfg(cfg),
                                         cfg.training.thresholds, {cfg.training.top_k});
    ensure_out_dir(cfg);
    open_out_file(cfg.data.out_dir + "/metrics.json") << metrics_to_json(ev.report).dump(2)
                                                      << '\n';
    auto responses = open_out_file(cfg.data.out_dir + "/responses.jsonl");
    std::size_t i = 0;
    for (const auto* d : split) {
        for (std::size_t t = 0; t < d->turns.size(); ++t, ++i) {
            responses << json{{"dialogue_id", d->id},
                              {"turn_index", t},
                              {"response", ev.responses[i]},
                              {"reference", d->turns[t].system}}
                             .dump()
                      << '\n';
        }
    }
    print_report(out, ev.report);
}

void run_retrieve(const config::RunConfig& cfg, const std::string& retriever_name,
                  std::ostream& out) {
    const auto kb = load_kb(cfg);
    const auto dialogues = load_dialogues(cfg, kb);
    const auto r = make_retriever(retriever_name, cfg, kb);
    for (const auto* d : split_or_throw(dialogues, cfg.data.split)) {
        for (int t = 0; t < static_cast<int>(d->turns.size()); ++t) {
            const auto context = dialogue::context_text(*d, t);
            for (const auto& res : r.fn(context, d->turns[static_cast<std::size_t>(t)])) {
                out << json{{"dialogue_id", d->id}, {"turn_index", t},
                            {"entity_id", res.entity_id}, {"entity_index", res.entity_index},
                            {"score", res.score},         {"prob", res.prob},
                            {"rank", res.rank}}
                           .dump()
                    << '\n';
            }
        }
    }
}

void run_annotate(const config::RunConfig& cfg, const std::string& retriever_name,
                  std::ostream& out) {
    const auto kb = load_kb(cfg);
    const auto dialogues = load_dialogues(cfg, kb);
    const auto r = make_retriever(retriever_name, cfg, kb);
    const auto mode = mode_for_cfg(cfg);
    for (const auto* d : split_or_throw(dialogues, cfg.data.split)) {
        for (int t = 0; t < static_cast<int>(d->turns.size()); ++t) {
            const auto context = dialogue::context_text(*d, t);
            const auto results = r.fn(context, d->turns[static_cast<std::size_t>(t)]);
            for (const auto& a :
                 metaknow::annotate(results, context, kb, cfg.training.thresholds, mode)) {
                out << json{{"dialogue_id", d->id},
                            {"turn_index", t},
                            {"entity_id", kb.entity(a.entity_index).id},
                            {"rank", a.meta.rank},
                            {"confidence", kConfidenceNames[static_cast<int>(a.meta.confidence)]},
                            {"cooccur", a.meta.cooccur == metaknow::Cooccur::kOld ? "old" : "new"},
                            {"negative", a.meta.is_negative},
                            {"rendering", a.rendering}}
                           .dump()
                    << '\n';
            }
        }
    }
}

void run_analyze(const config::RunConfig& cfg, const std::vector<std::string>& zoo_names,
                 const std::vector<std::string>& checkpoint_specs, std::ostream& out) {
    if (checkpoint_specs.empty()) {
        throw std::invalid_argument("--checkpoints name=prefix entries are required");
    }
    const auto kb = load_kb(cfg);
    const auto dialogues = load_dialogues(cfg, kb);
    const auto vocab = load_vocab(cfg);
    const int k = cfg.training.top_k;

    // Generator checkpoints; "without_meta"/"none" entries render no meta.
    std::vector<std::unique_ptr<System>> systems;
    std::vector<analysis::NamedGenerator> gens;
    for (const auto& spec : checkpoint_specs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
            throw std::invalid_argument("--checkpoints entries must be name=prefix, got: " + spec);
        }
        const auto name = spec.substr(0, eq);
        systems.push_back(std::make_unique<System>(cfg, vocab, spec.substr(eq + 1)));
        const auto mode = (name == "without_meta" || name == "none")
                              ? metaknow::RenderMode::kNone
                              : mode_for_cfg(cfg);
        gens.push_back({name, systems.back()->g.get(), mode});
    }

    const retriever::Bm25Index bm25(kb);
    // --checkpoint supplies the pretrained retriever; the first --checkpoints
    // entry supplies the jointly trained one.
    System pretrained(cfg, vocab, cfg.data.checkpoint);
    const auto pretrained_index = retriever::build_entity_index(*pretrained.enc, kb, 0);
    const auto joint_index = retriever::build_entity_index(*systems.front()->enc, kb, 0);
    auto full_zoo = analysis::standard_zoo(bm25, *pretrained.enc, pretrained_index,
                                           *systems.front()->enc, joint_index, kb, k);
    std::vector<analysis::NamedRetriever> zoo;
    if (zoo_names.empty()) {
        zoo = full_zoo;
    } else {
        for (const auto& name : zoo_names) {
            if (name == "random") {
                auto rng = std::make_shared<ad::Rng>(ad::mix_seed(cfg.training.seed, "cli.random"));
                zoo.push_back({"random", [rng, &kb, k](const std::string&, const dialogue::Turn&) {
                                   return retriever::random_retrieve(*rng, kb, k);
                               }});
                continue;
            }
            const auto it = std::find_if(full_zoo.begin(), full_zoo.end(),
                                         [&](const auto& nr) { return nr.name == name; });
            if (it == full_zoo.end()) throw std::invalid_argument("unknown zoo retriever: " + name);
            zoo.push_back(*it);
        }
    }

    const auto split = split_or_throw(dialogues, cfg.data.split);
    const auto study =
        analysis::misalignment_study(zoo, gens, split, kb, cfg.training.thresholds, k);
    ensure_out_dir(cfg);
    auto acsv = open_out_file(cfg.data.out_dir + "/alignment.csv");
    analysis::write_alignment_csv(acsv, study.rows);

    // Behavior statistics use each generator with the system's own retriever.
    const auto behavior_it =
        std::find_if(zoo.begin(), zoo.end(),
                     [](const auto& nr) { return nr.name == "jointly-trained-dense"; });
    const auto& behavior_cell = behavior_it != zoo.end() ? *behavior_it : zoo.front();
    std::vector<std::vector<std::string>> golds;
    for (const auto* d : split) {
        for (const auto& t : d->turns) golds.push_back(t.gold_entity_ids);
    }

    json summary;
    summary["k"] = k;
    summary["split"] = cfg.data.split;
    summary["behavior_retriever"] = behavior_cell.name;
    for (const auto& [name, r] : study.correlation) {
        summary["pearson"][name] = r.has_value() ? json(*r) : json(nullptr);
    }
    for (const auto& row : study.rows) {
        summary["rows"].push_back({{"generator", row.generator_name},
                                   {"retriever", row.retriever_name},
                                   {"recall_at_k", row.recall_at_k},
                                   {"entity_f1", row.entity_f1},
                                   {"bleu", row.bleu}});
    }
    for (std::size_t i = 0; i < gens.size(); ++i) {
        const auto ev = train::run_inference(behavior_cell.fn, *gens[i].generator, split, kb,
                                             gens[i].mode, cfg.training.thresholds, {k});
        if (i == 0) {
            const auto stats =
                analysis::behavior_stats(ev.responses, ev.retrievals, kb, cfg.training.thresholds);
            auto bcsv = open_out_file(cfg.data.out_dir + "/behavior.csv");
            analysis::write_behavior_csv(bcsv, stats);
            summary["behavior"] = {{"generator", gens[i].name},
                                   {"eligible_turns", stats.eligible_turns},
                                   {"total_turns", stats.total_turns}};
        }
        summary["gold_name_usage"][gens[i].name] =
            analysis::gold_name_usage(ev.responses, golds, kb);
    }
    open_out_file(cfg.data.out_dir + "/analysis.json") << summary.dump(2) << '\n';

    out << "alignment rows " << study.rows.size() << " -> " << cfg.data.out_dir
        << "/alignment.csv\n";
    for (const auto& [name, r] : study.correlation) {
        out << "pearson[" << name << "] ";
        if (r.has_value()) out << *r;
        else out << "null";
        out << '\n';
    }
    for (const auto& [name, usage] : summary["gold_name_usage"].items()) {
        out << "gold_name_usage[" << name << "] " << usage.get<double>() << '\n';
    }
}

void run_chat(const config::RunConfig& cfg, std::istream& in, std::ostream& out) {
    const auto kb = load_kb(cfg);
    const auto vocab = load_vocab(cfg);
    System sys(cfg, vocab, cfg.data.checkpoint);
    const auto index = retriever::build_entity_index(*sys.enc, kb, 0);
    const auto mode = mode_for_cfg(cfg);

    dialogue::Dialogue history;
    history.id = "chat";
    history.split = "test";
    out << "type a user turn (/quit to leave)\n";
    std::string line;
    out << "user> " << std::flush;
    while (std::getline(in, line)) {
        if (line == "/quit" || line == "/exit") break;
        if (line.empty()) {
            out << "user> " << std::flush;
            continue;
        }
        dialogue::Turn turn;
        turn.user = line;
        history.turns.push_back(turn);
        const auto context =
            dialogue::context_text(history, static_cast<int>(history.turns.size()) - 1);
        const auto results =
            retriever::retrieve_topk(sys.enc->encode_context_frozen(context), index, kb,
                                     cfg.training.top_k, sys.enc->config().cosine);
        const auto annotated =
            metaknow::annotate(results, context, kb, cfg.training.thresholds, mode);
        for (const auto& a : annotated) {
            const auto& e = kb.entity(a.entity_index);
            out << "  [" << a.meta.rank << "] " << e.id << " p="
                << results[static_cast<std::size_t>(&a - annotated.data())].prob
                << " conf=" << kConfidenceNames[static_cast<int>(a.meta.confidence)]
                << " cooccur=" << (a.meta.cooccur == metaknow::Cooccur::kOld ? "old" : "new");
            if (!a.rendering.empty()) out << "  " << a.rendering;
            out << '\n';
        }
        const auto response = sys.g->vocab().decode(sys.g->generate(context, annotated, kb));
        out << "bot> " << response << '\n';
        history.turns.back().system = response;
        out << "user> " << std::flush;
    }
    out << '\n';
}

std::string find_config_path(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
    }
    if (const char* env = std::getenv("MKTOD_CONFIG")) return env;
    return "";
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
             std::ostream& err) {
    config::RunConfig cfg;
    std::string config_sink;
    std::string meta_name;
    std::string retriever_name = "dense";
    std::vector<std::string> zoo_names;
    std::vector<std::string> checkpoint_specs;

    CLI::App app{"joint dense-retrieval dialogue system: data, training, evaluation, analysis"};
    app.require_subcommand(1);

    const auto add_data = [&](CLI::App* c) {
        c->add_option("--config", config_sink, "config file (TOML or JSON)");
        c->add_option("--kb", cfg.data.kb, "knowledge base JSON file");
        c->add_option("--dialogues", cfg.data.dialogues, "dialogue JSONL file");
        c->add_option("--vocab", cfg.data.vocab, "vocabulary file, one token per line");
        c->add_option("--checkpoint", cfg.data.checkpoint, "warm-start checkpoint prefix");
        c->add_option("--out", cfg.data.out_dir, "output directory");
        c->add_option("--name-attribute", cfg.data.name_attribute, "entity name attribute");
        c->add_option("--split", cfg.data.split, "dialogue split to read");
    };
    const auto add_model = [&](CLI::App* c) {
        c->add_option("--embed-dim", cfg.retriever.embed_dim, "retriever embedding width");
        c->add_option("--max-input-tokens", cfg.retriever.max_input_tokens,
                      "retriever input token cap");
        c->add_flag("--cosine", cfg.retriever.cosine, "cosine retrieval scores");
        c->add_option("--hidden-dim", cfg.generator.hidden_dim, "generator hidden width");
        c->add_option("--max-context-tokens", cfg.generator.max_context_tokens,
                      "generator context token cap");
        c->add_option("--max-entity-tokens", cfg.generator.max_entity_tokens,
                      "generator per-entity token cap");
        c->add_option("--max-output-tokens", cfg.generator.max_output_tokens,
                      "generated response token cap");
    };
    const auto add_meta = [&](CLI::App* c) {
        c->add_option("--meta", meta_name, "meta knowledge mode")
            ->check(CLI::IsMember({"prefix", "prompt", "ctr", "none"}));
        c->add_option("--t-low", cfg.training.thresholds.t_low, "low-confidence threshold");
        c->add_option("--t-high", cfg.training.thresholds.t_high, "high-confidence threshold");
    };
    const auto add_k = [&](CLI::App* c) {
        c->add_option("--k", cfg.training.top_k, "retrieved entities per turn");
    };
    const auto add_seed = [&](CLI::App* c) {
        c->add_option("--seed", cfg.training.seed, "rng seed");
    };

    auto* synth = app.add_subcommand("synth", "generate the synthetic lookup task");
    synth->add_option("--config", config_sink, "config file (TOML or JSON)");
    synth->add_option("--out", cfg.data.out_dir, "output directory");
    synth->add_option("--n-entities", cfg.synth.n_entities, "base entity count");
    synth->add_option("--n-attributes", cfg.synth.n_attributes, "informable attributes");
    synth->add_option("--n-dialogues", cfg.synth.n_dialogues, "dialogue count");
    synth->add_option("--distractor-rate", cfg.synth.distractor_rate,
                      "near-duplicates per base entity");
    synth->add_option("--seed", cfg.synth.seed, "rng seed");

    auto* ingest = app.add_subcommand("ingest", "load and validate a dataset");
    add_data(ingest);

    auto* pretrain = app.add_subcommand("pretrain", "distant-supervision retriever pretraining");
    add_data(pretrain);
    add_model(pretrain);
    pretrain->add_option("--steps", cfg.pretrain.steps, "optimizer steps");
    pretrain->add_option("--batch", cfg.pretrain.batch_size, "in-batch contrastive batch size");
    pretrain->add_option("--lr", cfg.pretrain.lr, "learning rate");
    pretrain->add_option("--log-every", cfg.pretrain.log_every, "log cadence");
    pretrain->add_option("--seed", cfg.pretrain.seed, "rng seed");

    auto* train_cmd = app.add_subcommand("train", "joint retriever/generator training");
    add_data(train_cmd);
    add_model(train_cmd);
    add_meta(train_cmd);
    add_k(train_cmd);
    add_seed(train_cmd);
    train_cmd->add_option("--steps", cfg.training.steps, "optimizer steps");
    train_cmd->add_option("--batch", cfg.training.batch_size, "batch size");
    train_cmd->add_option("--accum", cfg.training.grad_accum_steps, "gradient accumulation");
    train_cmd->add_option("--retriever-lr", cfg.training.retriever_lr, "retriever learning rate");
    train_cmd->add_option("--generator-lr", cfg.training.generator_lr, "generator learning rate");
    train_cmd->add_option("--weight-decay", cfg.training.weight_decay, "decoupled weight decay");
    train_cmd->add_option("--clip-norm", cfg.training.clip_norm, "per-group gradient clip");
    train_cmd->add_option("--alpha", cfg.training.alpha, "generation loss weight");
    train_cmd->add_option("--beta", cfg.training.beta, "marginal likelihood weight");
    train_cmd->add_option("--gamma", cfg.training.gamma, "contrastive weight");
    train_cmd->add_option("--margin", cfg.training.margin, "contrastive margin");
    train_cmd->add_option("--positive-set", cfg.training.positive_set_size,
                          "contrastive positives per turn");
    train_cmd->add_option("--index-rebuild-every", cfg.training.index_rebuild_every,
                          "steps between entity index rebuilds");
    train_cmd->add_option("--eval-every", cfg.training.eval_every,
                          "validation cadence (0 = final only)");
    train_cmd->add_option("--log-every", cfg.training.log_every, "log cadence");
    train_cmd->add_flag_callback("--no-mml", [&cfg] { cfg.training.use_mml = false; },
                                 "disable the marginal likelihood term");
    train_cmd->add_flag_callback("--no-negative", [&cfg] { cfg.training.use_negative = false; },
                                 "disable the appended negative entity");
    train_cmd->add_flag("--stop-generator-grad", cfg.training.stop_generator_grad_in_mml,
                        "detach generator likelihoods inside the marginal term");

    auto* eval_cmd = app.add_subcommand("eval", "run inference and score a split");
    add_data(eval_cmd);
    add_model(eval_cmd);
    add_meta(eval_cmd);
    add_k(eval_cmd);
    add_seed(eval_cmd);

    auto* retrieve = app.add_subcommand("retrieve", "emit retrieval results as JSON lines");
    add_data(retrieve);
    add_model(retrieve);
    add_k(retrieve);
    add_seed(retrieve);
    retrieve->add_option("--retriever", retriever_name, "retrieval strategy")
        ->check(CLI::IsMember({"dense", "bm25", "frequency", "oracle", "random"}));

    auto* annotate = app.add_subcommand("annotate", "emit annotated entities as JSON lines");
    add_data(annotate);
    add_model(annotate);
    add_meta(annotate);
    add_k(annotate);
    add_seed(annotate);
    annotate->add_option("--retriever", retriever_name, "retrieval strategy")
        ->check(CLI::IsMember({"dense", "bm25", "frequency", "oracle", "random"}));

    auto* analyze = app.add_subcommand("analyze", "misalignment study over a retriever zoo");
    add_data(analyze);
    add_model(analyze);
    add_meta(analyze);
    add_k(analyze);
    add_seed(analyze);
    analyze->add_option("--zoo", zoo_names,
                        "retrievers to include (default: the full standard zoo)");
    analyze->add_option("--checkpoints", checkpoint_specs,
                        "generator checkpoints as name=prefix entries");

    auto* chat = app.add_subcommand("chat", "interactive inspection loop");
    add_data(chat);
    add_model(chat);
    add_meta(chat);
    add_k(chat);
    add_seed(chat);

    try {
        const auto config_path = find_config_path(args);
        if (!config_path.empty()) config::apply_config_file(cfg, config_path);
        config::apply_config_env(cfg);
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("mktod");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (!meta_name.empty()) cfg.training.meta_mode = train::parse_meta_mode(meta_name);
        if (synth->parsed()) run_synth(cfg, out);
        else if (ingest->parsed()) run_ingest(cfg, out);
        else if (pretrain->parsed()) run_pretrain(cfg, out);
        else if (train_cmd->parsed()) run_train(cfg, out);
        else if (eval_cmd->parsed()) run_eval(cfg, out);
        else if (retrieve->parsed()) run_retrieve(cfg, retriever_name, out);
        else if (annotate->parsed()) run_annotate(cfg, retriever_name, out);
        else if (analyze->parsed()) run_analyze(cfg, zoo_names, checkpoint_specs, out);
        else if (chat->parsed()) run_chat(cfg, in, out);
        return 0;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
}

}  // namespace mktod::cli
