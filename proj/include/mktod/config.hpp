#pragma once

#include <string>

#include "mktod/training.hpp"

// Run configuration merged from defaults, a config file, MKTOD_* environment
// variables, and command-line flags — in that order of increasing precedence.
namespace mktod::config {

struct DataConfig {
    std::string kb;
    std::string dialogues;
    std::string vocab;
    std::string checkpoint;  // warm-start checkpoint prefix
    std::string out_dir = "run";
    std::string name_attribute = "name";
    std::string split = "test";
};

struct RunConfig {
    DataConfig data;
    retriever::RetrieverConfig retriever;
    gen::GeneratorConfig generator;
    train::TrainConfig training;
    retriever::PretrainConfig pretrain;
    dialogue::SynthSpec synth;
};

// Overlay a JSON object string of {section: {key: value}}; unknown sections
// or keys throw std::invalid_argument naming them.
void apply_config_text(RunConfig& cfg, const std::string& json_text);

// Reads TOML (by .toml extension) or JSON.
void apply_config_file(RunConfig& cfg, const std::string& path);

// Overlay MKTOD_<SECTION>_<KEY> environment variables, e.g. MKTOD_TRAIN_STEPS.
void apply_config_env(RunConfig& cfg);

// TOML subset ([section] headers, key = value with quoted strings, booleans,
// numbers, # comments) converted to a JSON object string.
std::string toml_to_json_text(const std::string& toml_text);

// Full resolved configuration as pretty-printed JSON (round-trips through
// apply_config_text).
std::string to_json_text(const RunConfig& cfg);
void save_config(const RunConfig& cfg, const std::string& path);

}  // namespace mktod::config
