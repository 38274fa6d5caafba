#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mktod/kb.hpp"

// Dialogue dataset model plus a deterministic synthetic lookup task used in
// place of full-scale dialogue corpora.
namespace mktod::dialogue {

struct Turn {
    std::string user;
    std::string system;
    std::vector<std::string> gold_entity_ids;
};

struct Dialogue {
    std::string id;
    std::string split;                  // train | valid | test
    std::vector<std::string> kb_scope;  // empty = global scope
    std::vector<Turn> turns;
};

// JSON lines, one dialogue per line:
// {"id","split","kb_scope","turns":[{"user","system","gold_entity_ids"}]}
// kb_scope is the string "global" or an array of entity ids. Gold and scope
// ids must resolve in the KB.
std::vector<Dialogue> load_dialogues(const std::string& path, const kb::KnowledgeBase& kb);
void save_dialogues(const std::string& path, const std::vector<Dialogue>& dialogues);

// c_t = u_1 <sep> r_1 <sep> ... r_{t-1} <sep> u_t for 0-based turn_index t-1;
// exactly 2t-1 utterance segments.
std::string context_text(const Dialogue& d, int turn_index);

std::vector<const Dialogue*> filter_split(const std::vector<Dialogue>& dialogues,
                                          const std::string& split);

struct SynthSpec {
    int n_entities = 50;
    int n_attributes = 4;  // informable attributes in addition to the name
    int n_dialogues = 500;
    int distractor_rate = 2;  // near-duplicates generated per base entity
    std::uint64_t seed = 13;
};

struct SynthResult {
    kb::KnowledgeBase kb;
    std::vector<Dialogue> dialogues;
};

// Entities come in families: a base entity plus distractor_rate near-copies
// differing in exactly one informable attribute (and the name). Each dialogue
// asks for one entity by attribute constraints; responses name the gold
// entity and quote attribute values verbatim. Deterministic under seed.
SynthResult make_synthetic_task(const SynthSpec& spec);

}  // namespace mktod::dialogue
