#include <filesystem>
#include <string>
#include <vector>

#include <doctest.h>

#include "mktod/autodiff.hpp"
#include "mktod/text.hpp"

using namespace mktod::text;

TEST_CASE("tokenize splits words and punctuation, keeps control tokens whole") {
    CHECK(tokenize("Hello, World!") == std::vector<std::string>{"hello", ",", "world", "!"});
    CHECK(tokenize("<2th-entity> Pizza Hut") ==
          std::vector<std::string>{"<2th-entity>", "pizza", "hut"});
    CHECK(tokenize("a<old-entity>b") == std::vector<std::string>{"a", "<old-entity>", "b"});
    CHECK(tokenize("price_range cheap") == std::vector<std::string>{"price_range", "cheap"});
    CHECK(tokenize("3 < 4 > 2") == std::vector<std::string>{"3", "<", "4", ">", "2"});
    CHECK(tokenize("") == std::vector<std::string>{});
}

TEST_CASE("vocab build respects min_count") {
    auto v1 = Vocab::build({"a b", "a"}, 1);
    CHECK(v1.contains("a"));
    CHECK(v1.contains("b"));

    auto v2 = Vocab::build({"a b", "a"}, 2);
    CHECK(v2.contains("a"));
    CHECK_FALSE(v2.contains("b"));
    CHECK(v2.encode("b") == std::vector<int>{kUnkId});
}

TEST_CASE("vocab reserves ids 0..4 and registers all prefix tokens") {
    auto v = Vocab::build({"x"}, 1);
    CHECK(v.id("<pad>") == 0);
    CHECK(v.id("<bos>") == 1);
    CHECK(v.id("<eos>") == 2);
    CHECK(v.id("<unk>") == 3);
    CHECK(v.id("<sep>") == 4);
    const std::vector<std::string> expected = {
        "<1th-entity>", "<2th-entity>", "<3th-entity>", "<4th-entity>", "<5th-entity>",
        "<other-entity>", "<high-confidence>", "<mid-confidence>", "<low-confidence>",
        "<old-entity>", "<new-entity>"};
    for (const auto& t : expected) {
        CAPTURE(t);
        CHECK(v.contains(t));
        CHECK(v.id(t) >= 5);
        CHECK(v.id(t) <= 15);
    }
}

TEST_CASE("vocab build rejects empty corpus and force-includes names") {
    CHECK_THROWS_AS(Vocab::build({}, 1), std::invalid_argument);
    auto v = Vocab::build({"hello"}, 1, {"price_range", "area"});
    CHECK(v.contains("price_range"));
    CHECK(v.contains("area"));
}

TEST_CASE("encode keeps control tokens atomic") {
    auto v = Vocab::build({"pizza hut is nice"}, 1);
    auto ids = v.encode("<2th-entity> pizza hut");
    REQUIRE(ids.size() == 3);
    CHECK(ids[0] == v.id("<2th-entity>"));
    CHECK(ids[1] == v.id("pizza"));
    CHECK(ids[2] == v.id("hut"));
}

TEST_CASE("decode of encode is identity on normalized in-vocab text") {
    std::vector<std::string> corpus = {
        "the quick brown fox jumps over the lazy dog",
        "pizza hut serves cheap italian food in the north , call 555 1234 !",
        "book a table for 5 people at 18 : 30 ?",
    };
    auto v = Vocab::build(corpus, 1);

    mktod::ad::Rng rng(31);
    std::vector<std::string> words;
    for (const auto& line : corpus) {
        for (const auto& t : tokenize(line)) words.push_back(t);
    }
    for (int trial = 0; trial < 100; ++trial) {
        std::string s;
        const int len = 1 + static_cast<int>(rng.next_int(12));
        for (int i = 0; i < len; ++i) {
            if (i) s += ' ';
            s += words[static_cast<std::size_t>(rng.next_int(static_cast<int>(words.size())))];
        }
        CAPTURE(s);
        CHECK(v.decode(v.encode(s)) == normalize(s));
    }
}

TEST_CASE("truncation keeps suffix for contexts and head for entities") {
    std::vector<int> ids(300);
    for (int i = 0; i < 300; ++i) ids[static_cast<std::size_t>(i)] = i;

    auto tail = truncate_tail(ids, 200);
    REQUIRE(tail.size() == 200);
    CHECK(tail.front() == 100);
    CHECK(tail.back() == 299);

    auto head = truncate_head(ids, 200);
    REQUIRE(head.size() == 200);
    CHECK(head.front() == 0);
    CHECK(head.back() == 199);

    CHECK(truncate_tail({1, 2}, 5) == std::vector<int>{1, 2});
    CHECK(truncate_head({1, 2}, 5) == std::vector<int>{1, 2});
}

TEST_CASE("vocab round-trips through its file format") {
    namespace fs = std::filesystem;
    auto v = Vocab::build({"alpha beta gamma alpha"}, 1, {"kb_name"});
    const auto path = (fs::temp_directory_path() / "mktod_vocab_test.txt").string();
    v.save(path);
    auto u = Vocab::load(path);
    CHECK(u.size() == v.size());
    for (int i = 0; i < v.size(); ++i) CHECK(u.token(i) == v.token(i));
    fs::remove(path);
}

TEST_CASE("normalize lowercases and standardizes spacing") {
    CHECK(normalize("Pizza  Hut") == "pizza hut");
    CHECK(normalize("  North-East  ") == "north - east");
}
