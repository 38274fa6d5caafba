#include "mktod/config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mktod::config {

namespace {

using nlohmann::json;

json to_json(const RunConfig& c) {
    json j;
    j["data"] = {{"kb", c.data.kb},
                 {"dialogues", c.data.dialogues},
                 {"vocab", c.data.vocab},
                 {"checkpoint", c.data.checkpoint},
                 {"out_dir", c.data.out_dir},
                 {"name_attribute", c.data.name_attribute},
                 {"split", c.data.split}};
    j["retriever"] = {{"embed_dim", c.retriever.embed_dim},
                      {"max_input_tokens", c.retriever.max_input_tokens},
                      {"cosine", c.retriever.cosine}};
    j["generator"] = {{"hidden_dim", c.generator.hidden_dim},
                      {"max_context_tokens", c.generator.max_context_tokens},
                      {"max_entity_tokens", c.generator.max_entity_tokens},
                      {"max_output_tokens", c.generator.max_output_tokens}};
    j["train"] = {{"alpha", c.training.alpha},
                  {"beta", c.training.beta},
                  {"gamma", c.training.gamma},
                  {"margin", c.training.margin},
                  {"top_k", c.training.top_k},
                  {"steps", c.training.steps},
                  {"retriever_lr", c.training.retriever_lr},
                  {"generator_lr", c.training.generator_lr},
                  {"weight_decay", c.training.weight_decay},
                  {"clip_norm", c.training.clip_norm},
                  {"batch_size", c.training.batch_size},
                  {"grad_accum_steps", c.training.grad_accum_steps},
                  {"positive_set_size", c.training.positive_set_size},
                  {"use_mml", c.training.use_mml},
                  {"use_negative", c.training.use_negative},
                  {"annotate_single_entities", c.training.annotate_single_entities},
                  {"stop_generator_grad_in_mml", c.training.stop_generator_grad_in_mml},
                  {"meta_mode", train::meta_mode_name(c.training.meta_mode)},
                  {"seed", c.training.seed},
                  {"index_rebuild_every", c.training.index_rebuild_every},
                  {"eval_every", c.training.eval_every},
                  {"log_every", c.training.log_every},
                  {"t_low", c.training.thresholds.t_low},
                  {"t_high", c.training.thresholds.t_high}};
    j["pretrain"] = {{"steps", c.pretrain.steps},
                     {"batch_size", c.pretrain.batch_size},
                     {"lr", c.pretrain.lr},
                     {"weight_decay", c.pretrain.weight_decay},
                     {"clip_norm", c.pretrain.clip_norm},
                     {"linear_decay", c.pretrain.linear_decay},
                     {"seed", c.pretrain.seed},
                     {"log_every", c.pretrain.log_every}};
    j["synth"] = {{"n_entities", c.synth.n_entities},
                  {"n_attributes", c.synth.n_attributes},
                  {"n_dialogues", c.synth.n_dialogues},
                  {"distractor_rate", c.synth.distractor_rate},
                  {"seed", c.synth.seed}};
    return j;
}

RunConfig from_json(const json& j) {
    RunConfig c;
    const auto& d = j.at("data");
    c.data.kb = d.at("kb").get<std::string>();
    c.data.dialogues = d.at("dialogues").get<std::string>();
    c.data.vocab = d.at("vocab").get<std::string>();
    c.data.checkpoint = d.at("checkpoint").get<std::string>();
    c.data.out_dir = d.at("out_dir").get<std::string>();
    c.data.name_attribute = d.at("name_attribute").get<std::string>();
    c.data.split = d.at("split").get<std::string>();
    const auto& r = j.at("retriever");
    c.retriever.embed_dim = r.at("embed_dim").get<int>();
    c.retriever.max_input_tokens = r.at("max_input_tokens").get<int>();
    c.retriever.cosine = r.at("cosine").get<bool>();
    const auto& g = j.at("generator");
    c.generator.hidden_dim = g.at("hidden_dim").get<int>();
    c.generator.max_context_tokens = g.at("max_context_tokens").get<int>();
    c.generator.max_entity_tokens = g.at("max_entity_tokens").get<int>();
    c.generator.max_output_tokens = g.at("max_output_tokens").get<int>();
    const auto& t = j.at("train");
    c.training.alpha = t.at("alpha").get<double>();
    c.training.beta = t.at("beta").get<double>();
    c.training.gamma = t.at("gamma").get<double>();
    c.training.margin = t.at("margin").get<double>();
    c.training.top_k = t.at("top_k").get<int>();
    c.training.steps = t.at("steps").get<int>();
    c.training.retriever_lr = t.at("retriever_lr").get<double>();
    c.training.generator_lr = t.at("generator_lr").get<double>();
    c.training.weight_decay = t.at("weight_decay").get<double>();
    c.training.clip_norm = t.at("clip_norm").get<double>();
    c.training.batch_size = t.at("batch_size").get<int>();
    c.training.grad_accum_steps = t.at("grad_accum_steps").get<int>();
    c.training.positive_set_size = t.at("positive_set_size").get<int>();
    c.training.use_mml = t.at("use_mml").get<bool>();
    c.training.use_negative = t.at("use_negative").get<bool>();
    c.training.annotate_single_entities = t.at("annotate_single_entities").get<bool>();
    c.training.stop_generator_grad_in_mml = t.at("stop_generator_grad_in_mml").get<bool>();
    c.training.meta_mode = train::parse_meta_mode(t.at("meta_mode").get<std::string>());
    c.training.seed = t.at("seed").get<std::uint64_t>();
    c.training.index_rebuild_every = t.at("index_rebuild_every").get<int>();
    c.training.eval_every = t.at("eval_every").get<int>();
    c.training.log_every = t.at("log_every").get<int>();
    c.training.thresholds.t_low = t.at("t_low").get<double>();
    c.training.thresholds.t_high = t.at("t_high").get<double>();
    const auto& p = j.at("pretrain");
    c.pretrain.steps = p.at("steps").get<int>();
    c.pretrain.batch_size = p.at("batch_size").get<int>();
    c.pretrain.lr = p.at("lr").get<double>();
    c.pretrain.weight_decay = p.at("weight_decay").get<double>();
    c.pretrain.clip_norm = p.at("clip_norm").get<double>();
    c.pretrain.linear_decay = p.at("linear_decay").get<bool>();
    c.pretrain.seed = p.at("seed").get<std::uint64_t>();
    c.pretrain.log_every = p.at("log_every").get<int>();
    const auto& s = j.at("synth");
    c.synth.n_entities = s.at("n_entities").get<int>();
    c.synth.n_attributes = s.at("n_attributes").get<int>();
    c.synth.n_dialogues = s.at("n_dialogues").get<int>();
    c.synth.distractor_rate = s.at("distractor_rate").get<int>();
    c.synth.seed = s.at("seed").get<std::uint64_t>();
    return c;
}

void check_known_keys(const json& patch) {
    const json schema = to_json(RunConfig{});
    if (!patch.is_object()) throw std::invalid_argument("config root must be a JSON object");
    for (const auto& [section, body] : patch.items()) {
        if (!schema.contains(section)) {
            throw std::invalid_argument("unknown config section: " + section);
        }
        if (!body.is_object()) {
            throw std::invalid_argument("config section must be an object: " + section);
        }
        for (const auto& [key, value] : body.items()) {
            (void)value;
            if (!schema.at(section).contains(key)) {
                throw std::invalid_argument("unknown config key: " + section + "." + key);
            }
        }
    }
}

void apply_patch(RunConfig& cfg, const json& patch) {
    check_known_keys(patch);
    json full = to_json(cfg);
    for (const auto& [section, body] : patch.items()) {
        for (const auto& [key, value] : body.items()) full[section][key] = value;
    }
    try {
        cfg = from_json(full);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("invalid config value: ") + e.what());
    }
}

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

// Cuts a # comment that is not inside a double-quoted string.
std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (in_string && ch == '\\') {
            ++i;
            continue;
        }
        if (ch == '"') in_string = !in_string;
        if (!in_string && ch == '#') return line.substr(0, i);
    }
    return line;
}

json parse_toml_scalar(const std::string& text, int lineno) {
    const auto fail = [&](const std::string& why) {
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + why);
    };
    if (text.empty()) fail("missing value");
    if (text.front() == '"') {
        std::string out;
        for (std::size_t i = 1; i < text.size(); ++i) {
            const char ch = text[i];
            if (ch == '\\') {
                if (i + 1 >= text.size()) fail("dangling escape in string");
                const char esc = text[++i];
                if (esc == 'n') out.push_back('\n');
                else if (esc == 't') out.push_back('\t');
                else if (esc == '"' || esc == '\\') out.push_back(esc);
                else fail(std::string("unsupported escape \\") + esc);
                continue;
            }
            if (ch == '"') {
                if (i + 1 != text.size()) fail("trailing characters after string");
                return json(out);
            }
            out.push_back(ch);
        }
        fail("unterminated string");
    }
    if (text == "true") return json(true);
    if (text == "false") return json(false);
    if (text.front() == '[') fail("arrays are not supported in config files");
    try {
        std::size_t used = 0;
        if (text.find_first_of(".eE") != std::string::npos) {
            const double v = std::stod(text, &used);
            if (used != text.size()) fail("bad number: " + text);
            return json(v);
        }
        if (text.front() != '-') {
            const std::uint64_t v = std::stoull(text, &used);
            if (used != text.size()) fail("bad number: " + text);
            return json(v);
        }
        const std::int64_t v = std::stoll(text, &used);
        if (used != text.size()) fail("bad number: " + text);
        return json(v);
    } catch (const std::invalid_argument&) {
        fail("bad value: " + text);
    } catch (const std::out_of_range&) {
        fail("number out of range: " + text);
    }
    return json();  // unreachable
}

std::string env_name(const std::string& section, const std::string& key) {
    std::string out = "MKTOD_" + section + "_" + key;
    for (auto& ch : out) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return out;
}

json parse_env_value(const std::string& raw, const json& current, const std::string& var) {
    const auto fail = [&] {
        throw std::invalid_argument("bad value for " + var + ": " + raw);
    };
    try {
        if (current.is_boolean()) {
            if (raw == "true" || raw == "1") return json(true);
            if (raw == "false" || raw == "0") return json(false);
            fail();
        }
        std::size_t used = 0;
        if (current.is_number_unsigned()) {
            const auto v = std::stoull(raw, &used);
            if (used != raw.size()) fail();
            return json(v);
        }
        if (current.is_number_integer()) {
            const auto v = std::stoll(raw, &used);
            if (used != raw.size()) fail();
            return json(v);
        }
        if (current.is_number_float()) {
            const auto v = std::stod(raw, &used);
            if (used != raw.size()) fail();
            return json(v);
        }
    } catch (const std::invalid_argument&) {
        fail();
    } catch (const std::out_of_range&) {
        fail();
    }
    return json(raw);
}

}  // namespace

void apply_config_text(RunConfig& cfg, const std::string& json_text) {
    json patch;
    try {
        patch = json::parse(json_text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config parse error: ") + e.what());
    }
    apply_patch(cfg, patch);
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read config file: " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    const bool toml = path.size() >= 5 && path.compare(path.size() - 5, 5, ".toml") == 0;
    apply_config_text(cfg, toml ? toml_to_json_text(buffer.str()) : buffer.str());
}

void apply_config_env(RunConfig& cfg) {
    const json schema = to_json(cfg);
    json patch = json::object();
    for (const auto& [section, body] : schema.items()) {
        for (const auto& [key, value] : body.items()) {
            const auto var = env_name(section, key);
            const char* raw = std::getenv(var.c_str());
            if (!raw) continue;
            patch[section][key] = parse_env_value(raw, value, var);
        }
    }
    if (!patch.empty()) apply_patch(cfg, patch);
}

std::string toml_to_json_text(const std::string& toml_text) {
    json root = json::object();
    std::string section;
    std::istringstream in(toml_text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto fail = [&](const std::string& why) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + why);
        };
        const std::string s = trim(strip_comment(line));
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') fail("bad section header: " + s);
            section = trim(s.substr(1, s.size() - 2));
            if (section.empty()) fail("empty section name");
            if (!root.contains(section)) root[section] = json::object();
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos) fail("expected key = value, got: " + s);
        const std::string key = trim(s.substr(0, eq));
        if (key.empty()) fail("empty key");
        const json value = parse_toml_scalar(trim(s.substr(eq + 1)), lineno);
        if (section.empty()) root[key] = value;
        else root[section][key] = value;
    }
    return root.dump();
}

std::string to_json_text(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

void save_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write config file: " + path);
    out << to_json_text(cfg);
}

}  // namespace mktod::config
