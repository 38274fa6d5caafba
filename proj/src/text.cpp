#include "mktod/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <stdexcept>

namespace mktod::text {

const std::vector<std::string>& meta_tokens() {
    static const std::vector<std::string> tokens = {
        "<1th-entity>", "<2th-entity>", "<3th-entity>", "<4th-entity>", "<5th-entity>",
        "<other-entity>", "<high-confidence>", "<mid-confidence>", "<low-confidence>",
        "<old-entity>", "<new-entity>",
    };
    return tokens;
}

namespace {

bool is_word_char(char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
}

// Matches a whole <...> span at position i of already-lowercased text;
// returns its length or 0. Spans contain word characters and hyphens only.
std::size_t control_span(const std::string& s, std::size_t i) {
    if (s[i] != '<') return 0;
    std::size_t j = i + 1;
    while (j < s.size() && (is_word_char(s[j]) || s[j] == '-')) ++j;
    if (j > i + 1 && j < s.size() && s[j] == '>') return j - i + 1;
    return 0;
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
    std::string lower(text);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });

    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < lower.size()) {
        const char c = lower[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        if (const std::size_t span = control_span(lower, i); span > 0) {
            out.push_back(lower.substr(i, span));
            i += span;
            continue;
        }
        if (is_word_char(c)) {
            std::size_t j = i + 1;
            while (j < lower.size() && is_word_char(lower[j])) ++j;
            out.push_back(lower.substr(i, j - i));
            i = j;
            continue;
        }
        out.push_back(std::string(1, c));
        ++i;
    }
    return out;
}

std::string normalize(const std::string& text) {
    const auto tokens = tokenize(text);
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

void Vocab::push(const std::string& token) {
    if (index_.count(token)) return;
    index_.emplace(token, static_cast<int>(tokens_.size()));
    tokens_.push_back(token);
}

Vocab Vocab::build(const std::vector<std::string>& corpus, int min_count,
                   const std::vector<std::string>& force_include) {
    if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");

    Vocab v;
    v.push(kPadToken);
    v.push(kBosToken);
    v.push(kEosToken);
    v.push(kUnkToken);
    v.push(kSepToken);
    for (const auto& t : meta_tokens()) v.push(t);
    for (const auto& t : force_include) v.push(t);

    std::map<std::string, std::int64_t> counts;
    for (const auto& line : corpus) {
        for (const auto& tok : tokenize(line)) ++counts[tok];
    }
    std::vector<std::pair<std::string, std::int64_t>> ordered(counts.begin(), counts.end());
    std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (const auto& [tok, count] : ordered) {
        if (count >= min_count) v.push(tok);
    }
    return v;
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read vocab file: " + path);
    Vocab v;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        v.push(line);
    }
    if (v.size() < 5 || v.tokens_[kUnkId] != kUnkToken) {
        throw std::runtime_error("vocab file missing reserved tokens: " + path);
    }
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocab file: " + path);
    for (const auto& t : tokens_) out << t << "\n";
}

bool Vocab::contains(const std::string& token) const { return index_.count(token) > 0; }

int Vocab::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size()) {
        throw std::out_of_range("vocab id " + std::to_string(id) + " out of range [0," +
                                std::to_string(size()) + ")");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& text) const {
    return encode_tokens(tokenize(text));
}

std::vector<int> Vocab::encode_tokens(const std::vector<std::string>& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
}

std::string Vocab::decode(const std::vector<int>& ids, bool strip_reserved) const {
    std::string out;
    for (int i : ids) {
        if (strip_reserved && (i == kPadId || i == kBosId || i == kEosId)) continue;
        if (!out.empty()) out += ' ';
        out += token(i);
    }
    return out;
}

std::vector<int> truncate_head(std::vector<int> ids, int max_len) {
    if (max_len >= 0 && static_cast<int>(ids.size()) > max_len) ids.resize(max_len);
    return ids;
}

std::vector<int> truncate_tail(std::vector<int> ids, int max_len) {
    if (max_len >= 0 && static_cast<int>(ids.size()) > max_len) {
        ids.erase(ids.begin(), ids.end() - max_len);
    }
    return ids;
}

}  // namespace mktod::text
