#include "mktod/dialogue.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "mktod/autodiff.hpp"
#include "mktod/text.hpp"

namespace mktod::dialogue {

namespace {

void validate_ids(const std::vector<std::string>& ids, const kb::KnowledgeBase& kb,
                  const std::string& dialogue_id, int turn_index, const char* field) {
    for (const auto& id : ids) {
        if (kb.index_of(id) < 0) {
            std::ostringstream os;
            os << "dialogue '" << dialogue_id << "'";
            if (turn_index >= 0) os << " turn " << turn_index;
            os << ": " << field << " references unknown entity id '" << id << "'";
            throw std::runtime_error(os.str());
        }
    }
}

}  // namespace

std::vector<Dialogue> load_dialogues(const std::string& path, const kb::KnowledgeBase& kb) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read dialogue file: " + path);

    std::vector<Dialogue> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("dialogue file " + path + " line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        Dialogue d;
        d.id = obj.at("id").get<std::string>();
        d.split = obj.value("split", "train");
        const auto& scope = obj.at("kb_scope");
        if (scope.is_string()) {
            if (scope.get<std::string>() != "global") {
                throw std::runtime_error("dialogue '" + d.id + "': kb_scope string must be \"global\"");
            }
        } else {
            d.kb_scope = scope.get<std::vector<std::string>>();
            validate_ids(d.kb_scope, kb, d.id, -1, "kb_scope");
        }
        for (const auto& t : obj.at("turns")) {
            Turn turn;
            turn.user = t.at("user").get<std::string>();
            turn.system = t.at("system").get<std::string>();
            if (t.contains("gold_entity_ids")) {
                turn.gold_entity_ids = t.at("gold_entity_ids").get<std::vector<std::string>>();
            }
            validate_ids(turn.gold_entity_ids, kb, d.id, static_cast<int>(d.turns.size()),
                         "gold_entity_ids");
            d.turns.push_back(std::move(turn));
        }
        if (d.turns.empty()) throw std::runtime_error("dialogue '" + d.id + "' has no turns");
        out.push_back(std::move(d));
    }
    return out;
}

void save_dialogues(const std::string& path, const std::vector<Dialogue>& dialogues) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write dialogue file: " + path);
    for (const auto& d : dialogues) {
        nlohmann::ordered_json obj;
        obj["id"] = d.id;
        obj["split"] = d.split;
        if (d.kb_scope.empty()) obj["kb_scope"] = "global";
        else obj["kb_scope"] = d.kb_scope;
        auto turns = nlohmann::ordered_json::array();
        for (const auto& t : d.turns) {
            nlohmann::ordered_json turn;
            turn["user"] = t.user;
            turn["system"] = t.system;
            turn["gold_entity_ids"] = t.gold_entity_ids;
            turns.push_back(std::move(turn));
        }
        obj["turns"] = std::move(turns);
        out << obj.dump() << "\n";
    }
}

std::string context_text(const Dialogue& d, int turn_index) {
    if (turn_index < 0 || turn_index >= static_cast<int>(d.turns.size())) {
        throw std::out_of_range("context_text: turn " + std::to_string(turn_index) +
                                " of dialogue '" + d.id + "' with " +
                                std::to_string(d.turns.size()) + " turns");
    }
    std::string out;
    const std::string sep = std::string(" ") + text::kSepToken + " ";
    for (int t = 0; t < turn_index; ++t) {
        out += d.turns[static_cast<std::size_t>(t)].user;
        out += sep;
        out += d.turns[static_cast<std::size_t>(t)].system;
        out += sep;
    }
    out += d.turns[static_cast<std::size_t>(turn_index)].user;
    return out;
}

std::vector<const Dialogue*> filter_split(const std::vector<Dialogue>& dialogues,
                                          const std::string& split) {
    std::vector<const Dialogue*> out;
    for (const auto& d : dialogues) {
        if (d.split == split) out.push_back(&d);
    }
    return out;
}

// ---- synthetic task -------------------------------------------------------

namespace {

struct Pool {
    std::string attr;
    std::vector<std::string> values;
};

std::vector<Pool> make_pools(int n_attributes) {
    static const std::vector<Pool> named = {
        {"area", {"north", "south", "east", "west", "centre", "riverside"}},
        {"food", {"italian", "chinese", "indian", "thai", "french", "mexican", "british", "japanese"}},
        {"price_range", {"cheap", "moderate", "expensive"}},
        {"rating", {"one star", "two stars", "three stars", "four stars", "five stars"}},
        {"parking", {"street parking", "private lot", "valet parking"}},
        {"wifi", {"free wifi", "paid wifi", "wired internet"}},
        {"music", {"live jazz", "quiet piano", "folk band"}},
        {"terrace", {"garden terrace", "roof terrace", "indoor patio"}},
    };
    std::vector<Pool> pools;
    for (int i = 0; i < n_attributes; ++i) {
        if (i < static_cast<int>(named.size())) {
            pools.push_back(named[static_cast<std::size_t>(i)]);
        } else {
            const std::string suffix = std::to_string(i);
            pools.push_back({"extra_" + suffix,
                             {"alpha " + suffix, "beta " + suffix, "gamma " + suffix,
                              "delta " + suffix}});
        }
    }
    return pools;
}

std::vector<std::string> make_names(int count, ad::Rng& rng) {
    static const std::vector<std::string> adjectives = {
        "golden", "silver", "royal",  "happy",  "cosy", "grand", "little", "old",    "blue",  "green",
        "red",    "white",  "sunny",  "quiet",  "lucky", "jolly", "amber", "velvet", "ivory", "copper"};
    static const std::vector<std::string> nouns = {
        "lion",   "crown",  "garden", "palace",   "corner", "bridge", "house", "anchor", "rose", "castle",
        "kitchen", "harbour", "star", "mill", "barn", "oak", "swan", "fountain", "lantern", "orchard"};
    std::vector<int> combos(adjectives.size() * nouns.size());
    for (std::size_t i = 0; i < combos.size(); ++i) combos[i] = static_cast<int>(i);
    rng.shuffle(combos);
    std::vector<std::string> names;
    names.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const int c = combos[static_cast<std::size_t>(i) % combos.size()];
        std::string name = adjectives[static_cast<std::size_t>(c) / nouns.size()] + " " +
                           nouns[static_cast<std::size_t>(c) % nouns.size()];
        if (static_cast<std::size_t>(i) >= combos.size()) {
            name += " " + std::to_string(i / combos.size() + 1);
        }
        names.push_back(std::move(name));
    }
    return names;
}

std::string pick(const std::vector<std::string>& v, ad::Rng& rng) {
    return v[static_cast<std::size_t>(rng.next_int(static_cast<int>(v.size())))];
}

std::string render_constraints(const std::vector<std::pair<std::string, std::string>>& cs) {
    std::string out;
    for (std::size_t i = 0; i < cs.size(); ++i) {
        if (i) out += " and ";
        out += cs[i].first + " " + cs[i].second;
    }
    return out;
}

}  // namespace

SynthResult make_synthetic_task(const SynthSpec& spec) {
    if (spec.n_entities < 1 || spec.n_attributes < 1 || spec.n_dialogues < 1) {
        throw std::invalid_argument("synthetic task: all counts must be >= 1");
    }
    if (spec.distractor_rate < 0 || spec.n_entities < spec.distractor_rate + 1) {
        throw std::invalid_argument("synthetic task: need n_entities >= distractor_rate + 1");
    }

    ad::Rng rng(spec.seed);
    const auto pools = make_pools(spec.n_attributes);
    const auto names = make_names(spec.n_entities, rng);

    std::vector<kb::Entity> entities;
    std::set<std::vector<std::string>> seen_tuples;
    int next = 0;
    while (next < spec.n_entities) {
        // Draw a base value tuple; with no distractors every tuple must be
        // unique so that constraints can always isolate one entity.
        std::vector<std::string> base;
        for (int tries = 0;; ++tries) {
            base.clear();
            for (const auto& p : pools) base.push_back(pick(p.values, rng));
            if (spec.distractor_rate > 0 || seen_tuples.insert(base).second) break;
            if (tries > 4096) {
                throw std::invalid_argument(
                    "synthetic task: value pools too small for unique entities");
            }
        }
        for (int member = 0; member <= spec.distractor_rate && next < spec.n_entities; ++member) {
            std::vector<std::string> values = base;
            if (member > 0) {
                // Near-duplicate: flip exactly one informable attribute.
                const int a = static_cast<int>(rng.next_int(spec.n_attributes));
                const auto& pool = pools[static_cast<std::size_t>(a)].values;
                std::string replacement;
                do {
                    replacement = pick(pool, rng);
                } while (pool.size() > 1 && replacement == values[static_cast<std::size_t>(a)]);
                values[static_cast<std::size_t>(a)] = replacement;
            }
            kb::Entity e;
            char id[16];
            std::snprintf(id, sizeof(id), "e%03d", next + 1);
            e.id = id;
            e.attributes.emplace_back("name", names[static_cast<std::size_t>(next)]);
            for (int a = 0; a < spec.n_attributes; ++a) {
                e.attributes.emplace_back(pools[static_cast<std::size_t>(a)].attr,
                                          values[static_cast<std::size_t>(a)]);
            }
            entities.push_back(std::move(e));
            ++next;
        }
    }
    auto knowledge = kb::KnowledgeBase::from_entities(std::move(entities), "name");

    const std::vector<std::string> user_first = {
        "i am looking for a place with %C .",
        "can you find me something with %C ?",
        "i want %C please .",
    };
    const std::vector<std::string> system_first = {
        "%N is a great match , its %A is %V .",
        "how about %N ? the %A is %V .",
        "i suggest %N , it offers %A %V .",
    };
    const std::vector<std::string> user_second = {
        "what is the %A at %N ?",
        "and the %A of %N is what ?",
        "tell me the %A of %N .",
    };
    const std::vector<std::string> system_second = {
        "the %A at %N is %V .",
        "%N has %A %V .",
        "at %N the %A is %V .",
    };
    auto fill = [](std::string tpl, const std::string& key, const std::string& value) {
        const auto pos = tpl.find(key);
        if (pos != std::string::npos) tpl.replace(pos, key.size(), value);
        return tpl;
    };

    std::vector<Dialogue> dialogues;
    for (int i = 0; i < spec.n_dialogues; ++i) {
        const int gold = static_cast<int>(rng.next_int(knowledge.size()));
        const kb::Entity& e = knowledge.entity(gold);
        const std::string name = knowledge.name_value(gold);

        // Constraint attributes are a random subset of the gold entity's
        // informable attributes; without distractors the subset grows until it
        // isolates the gold entity.
        std::vector<int> attr_order(static_cast<std::size_t>(spec.n_attributes));
        for (int a = 0; a < spec.n_attributes; ++a) attr_order[static_cast<std::size_t>(a)] = a;
        rng.shuffle(attr_order);
        int n_constraints = std::min(spec.n_attributes, spec.n_attributes == 1 ? 1 : 2);
        auto constraints_of = [&](int k) {
            std::vector<std::pair<std::string, std::string>> cs;
            for (int j = 0; j < k; ++j) {
                const auto& [attr, value] =
                    e.attributes[static_cast<std::size_t>(attr_order[static_cast<std::size_t>(j)]) + 1];
                cs.emplace_back(attr, kb::normalize_value(value));
            }
            return cs;
        };
        if (spec.distractor_rate == 0) {
            auto satisfied_by = [&](const std::vector<std::pair<std::string, std::string>>& cs) {
                int count = 0;
                for (const auto& other : knowledge.entities()) {
                    bool ok = true;
                    for (const auto& [attr, value] : cs) ok = ok && other.value_of(attr) == value;
                    count += ok ? 1 : 0;
                }
                return count;
            };
            while (n_constraints < spec.n_attributes &&
                   satisfied_by(constraints_of(n_constraints)) > 1) {
                ++n_constraints;
            }
        }
        const auto constraints = constraints_of(n_constraints);

        Dialogue d;
        char id[24];
        std::snprintf(id, sizeof(id), "d%05d", i + 1);
        d.id = id;

        Turn first;
        first.user = fill(pick(user_first, rng), "%C", render_constraints(constraints));
        const auto& [a3, v3raw] =
            e.attributes[static_cast<std::size_t>(rng.next_int(spec.n_attributes)) + 1];
        first.system = fill(fill(fill(pick(system_first, rng), "%N", name), "%A", a3), "%V",
                            kb::normalize_value(v3raw));
        first.gold_entity_ids = {e.id};
        d.turns.push_back(std::move(first));

        if (rng.next_double() < 0.5) {
            const auto& [a4, v4raw] =
                e.attributes[static_cast<std::size_t>(rng.next_int(spec.n_attributes)) + 1];
            Turn second;
            second.user = fill(fill(pick(user_second, rng), "%A", a4), "%N", name);
            second.system = fill(fill(fill(pick(system_second, rng), "%N", name), "%A", a4), "%V",
                                 kb::normalize_value(v4raw));
            second.gold_entity_ids = {e.id};
            d.turns.push_back(std::move(second));
        }
        dialogues.push_back(std::move(d));
    }

    // Last fifth of the generated order becomes the held-out halves.
    const int n = spec.n_dialogues;
    const int n_eval = n >= 10 ? n / 10 : (n >= 3 ? 1 : 0);
    for (int i = 0; i < n; ++i) {
        auto& d = dialogues[static_cast<std::size_t>(i)];
        if (i >= n - n_eval) d.split = "test";
        else if (i >= n - 2 * n_eval) d.split = "valid";
        else d.split = "train";
    }

    return {std::move(knowledge), std::move(dialogues)};
}

}  // namespace mktod::dialogue
