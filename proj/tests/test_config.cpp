#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <doctest.h>
#include <json.hpp>

#include "mktod/config.hpp"

using namespace mktod;
using nlohmann::json;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("mktod-config-" + std::to_string(::getpid()) + "-" +
                std::to_string(counter()++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    static int& counter() {
        static int n = 0;
        return n;
    }
    std::string file(const std::string& name, const std::string& content) const {
        const auto p = (path / name).string();
        std::ofstream(p) << content;
        return p;
    }
};

struct EnvGuard {
    std::string name;
    EnvGuard(const std::string& n, const std::string& value) : name(n) {
        ::setenv(n.c_str(), value.c_str(), 1);
    }
    ~EnvGuard() { ::unsetenv(name.c_str()); }
};

}  // namespace

TEST_CASE("config defaults round-trip through the json text form") {
    config::RunConfig a;
    const auto text = config::to_json_text(a);
    CHECK(text.back() == '\n');

    config::RunConfig b;
    b.training.steps = 999;  // must be overwritten back to the default
    config::apply_config_text(b, text);
    CHECK(config::to_json_text(b) == text);
    CHECK(b.training.steps == a.training.steps);
}

TEST_CASE("config text overlays fields across every section") {
    config::RunConfig cfg;
    config::apply_config_text(cfg, R"({
        "data": {"kb": "k.json", "split": "valid"},
        "retriever": {"embed_dim": 8, "cosine": true},
        "generator": {"hidden_dim": 5},
        "train": {"steps": 7, "meta_mode": "prompt", "t_low": 0.3, "use_mml": false,
                  "seed": 123},
        "pretrain": {"lr": 0.5},
        "synth": {"n_entities": 9}
    })");
    CHECK(cfg.data.kb == "k.json");
    CHECK(cfg.data.split == "valid");
    CHECK(cfg.data.out_dir == "run");  // untouched default
    CHECK(cfg.retriever.embed_dim == 8);
    CHECK(cfg.retriever.cosine);
    CHECK(cfg.generator.hidden_dim == 5);
    CHECK(cfg.training.steps == 7);
    CHECK(cfg.training.meta_mode == train::MetaMode::kPrompt);
    CHECK(cfg.training.thresholds.t_low == 0.3);
    CHECK_FALSE(cfg.training.use_mml);
    CHECK(cfg.training.seed == 123);
    CHECK(cfg.pretrain.lr == 0.5);
    CHECK(cfg.synth.n_entities == 9);

    // A second overlay only touches what it names.
    config::apply_config_text(cfg, R"({"train": {"steps": 8}})");
    CHECK(cfg.training.steps == 8);
    CHECK_FALSE(cfg.training.use_mml);
}

TEST_CASE("config rejects unknown names and bad values") {
    config::RunConfig cfg;
    CHECK_THROWS_WITH_AS(config::apply_config_text(cfg, R"({"bogus": {"x": 1}})"),
                         "unknown config section: bogus", std::invalid_argument);
    CHECK_THROWS_WITH_AS(config::apply_config_text(cfg, R"({"train": {"nope": 1}})"),
                         "unknown config key: train.nope", std::invalid_argument);
    CHECK_THROWS_WITH_AS(config::apply_config_text(cfg, R"({"train": 3})"),
                         "config section must be an object: train", std::invalid_argument);
    CHECK_THROWS_WITH_AS(config::apply_config_text(cfg, R"([1, 2])"),
                         "config root must be a JSON object", std::invalid_argument);
    CHECK_THROWS_AS(config::apply_config_text(cfg, R"({"train": {"steps": "abc"}})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(config::apply_config_text(cfg, R"({"train": {"meta_mode": "wild"}})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(config::apply_config_text(cfg, "not json"), std::invalid_argument);
    // A failed overlay leaves the config untouched.
    CHECK(cfg.training.steps == config::RunConfig{}.training.steps);
}

TEST_CASE("toml subset converts to the json patch form") {
    const std::string toml = R"(# full-line comment
[data]
kb = "task/kb.json"   # trailing comment
split = "test # not a comment"
checkpoint = "pre\\ckpt\"q\""

[train]
steps = 40
alpha = 1.5
use_mml = false
seed = 18446744073709551615

[synth]
n_entities = 12
)";
    const auto j = json::parse(config::toml_to_json_text(toml));
    CHECK(j["data"]["kb"] == "task/kb.json");
    CHECK(j["data"]["split"] == "test # not a comment");
    CHECK(j["data"]["checkpoint"] == "pre\\ckpt\"q\"");
    CHECK(j["train"]["steps"] == 40);
    CHECK(j["train"]["steps"].is_number_unsigned());
    CHECK(j["train"]["alpha"] == 1.5);
    CHECK(j["train"]["alpha"].is_number_float());
    CHECK(j["train"]["use_mml"] == false);
    CHECK(j["train"]["seed"] == 18446744073709551615ull);
    CHECK(j["synth"]["n_entities"] == 12);

    SUBCASE("negative and exponent numbers") {
        const auto n = json::parse(config::toml_to_json_text("a = -3\nb = 2e2\nc = -0.5\n"));
        CHECK(n["a"] == -3);
        CHECK(n["a"].is_number_integer());
        CHECK(n["b"] == 200.0);
        CHECK(n["c"] == -0.5);
    }
    SUBCASE("errors carry the line number") {
        CHECK_THROWS_WITH_AS(config::toml_to_json_text("x = 1\ny 2\n"),
                             "config line 2: expected key = value, got: y 2",
                             std::invalid_argument);
        CHECK_THROWS_WITH_AS(config::toml_to_json_text("[data\n"),
                             "config line 1: bad section header: [data",
                             std::invalid_argument);
        CHECK_THROWS_WITH_AS(config::toml_to_json_text("x = [1, 2]\n"),
                             "config line 1: arrays are not supported in config files",
                             std::invalid_argument);
        CHECK_THROWS_AS(config::toml_to_json_text("x = \"open\n"), std::invalid_argument);
        CHECK_THROWS_AS(config::toml_to_json_text("x = 12q\n"), std::invalid_argument);
        CHECK_THROWS_AS(config::toml_to_json_text("x = \"a\\q\"\n"), std::invalid_argument);
        CHECK_THROWS_AS(config::toml_to_json_text("x =\n"), std::invalid_argument);
    }
}

TEST_CASE("config files load by extension") {
    TempDir dir;
    const auto toml = dir.file("run.toml", "[train]\nsteps = 17\n");
    const auto js = dir.file("run.json", R"({"train": {"steps": 23}})");

    config::RunConfig cfg;
    config::apply_config_file(cfg, toml);
    CHECK(cfg.training.steps == 17);
    config::apply_config_file(cfg, js);
    CHECK(cfg.training.steps == 23);
    CHECK_THROWS_AS(config::apply_config_file(cfg, (dir.path / "missing.toml").string()),
                    std::invalid_argument);
}

TEST_CASE("environment variables overlay with schema-typed parsing") {
    config::RunConfig cfg;
    {
        EnvGuard a("MKTOD_TRAIN_STEPS", "42");
        EnvGuard b("MKTOD_RETRIEVER_COSINE", "1");
        EnvGuard c("MKTOD_DATA_KB", "from-env.json");
        EnvGuard d("MKTOD_TRAIN_ALPHA", "2.5");
        EnvGuard e("MKTOD_TRAIN_USE_MML", "false");
        config::apply_config_env(cfg);
    }
    CHECK(cfg.training.steps == 42);
    CHECK(cfg.retriever.cosine);
    CHECK(cfg.data.kb == "from-env.json");
    CHECK(cfg.training.alpha == 2.5);
    CHECK_FALSE(cfg.training.use_mml);

    SUBCASE("no variables set leaves the config untouched") {
        config::RunConfig fresh;
        config::apply_config_env(fresh);
        CHECK(config::to_json_text(fresh) == config::to_json_text(config::RunConfig{}));
    }
    SUBCASE("unparsable values name the variable") {
        EnvGuard bad("MKTOD_TRAIN_STEPS", "soon");
        config::RunConfig fresh;
        CHECK_THROWS_WITH_AS(config::apply_config_env(fresh),
                             "bad value for MKTOD_TRAIN_STEPS: soon", std::invalid_argument);
    }
    SUBCASE("bool variables reject non-bool text") {
        EnvGuard bad("MKTOD_TRAIN_USE_MML", "maybe");
        config::RunConfig fresh;
        CHECK_THROWS_AS(config::apply_config_env(fresh), std::invalid_argument);
    }
}

TEST_CASE("saved config files reload identically") {
    TempDir dir;
    config::RunConfig cfg;
    cfg.data.out_dir = "elsewhere";
    cfg.training.meta_mode = train::MetaMode::kCtr;
    cfg.training.seed = 77;
    const auto path = (dir.path / "config.json").string();
    config::save_config(cfg, path);

    config::RunConfig loaded;
    config::apply_config_file(loaded, path);
    CHECK(config::to_json_text(loaded) == config::to_json_text(cfg));
    CHECK(loaded.training.meta_mode == train::MetaMode::kCtr);
    CHECK_THROWS_AS(config::save_config(cfg, (dir.path / "no-such" / "config.json").string()),
                    std::runtime_error);
}
