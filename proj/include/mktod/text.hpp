#pragma once

#include <string>
#include <unordered_map>
#include <vector>

// Word-level vocabulary and tokenization. Angle-bracket control tokens such
// as <2th-entity> are atomic: the tokenizer never splits a <...> span, no
// matter what surrounds it.
namespace mktod::text {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kSepId = 4;

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kBosToken = "<bos>";
inline constexpr const char* kEosToken = "<eos>";
inline constexpr const char* kUnkToken = "<unk>";
inline constexpr const char* kSepToken = "<sep>";

// Rank, confidence and co-occurrence prefix tokens, in registry order; these
// occupy vocab ids 5..15 in every built vocabulary.
const std::vector<std::string>& meta_tokens();

// Lowercases, splits word characters [a-z0-9_] into runs, keeps every other
// non-space character as a single-character token, and keeps <...> spans
// whole.
std::vector<std::string> tokenize(const std::string& text);

// Canonical form used for value matching: tokens joined by single spaces.
std::string normalize(const std::string& text);

class Vocab {
public:
    // Reserved + meta tokens first, then force_include in order, then corpus
    // tokens with count >= min_count ordered by descending count (ties
    // lexicographic).
    static Vocab build(const std::vector<std::string>& corpus, int min_count,
                       const std::vector<std::string>& force_include = {});

    // One token per line; line number = id.
    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    int size() const { return static_cast<int>(tokens_.size()); }
    bool contains(const std::string& token) const;
    int id(const std::string& token) const;  // kUnkId fallback
    const std::string& token(int id) const;

    std::vector<int> encode(const std::string& text) const;
    std::vector<int> encode_tokens(const std::vector<std::string>& tokens) const;
    // Joins tokens with spaces; drops PAD/BOS/EOS when strip_reserved.
    std::string decode(const std::vector<int>& ids, bool strip_reserved = true) const;

private:
    Vocab() = default;
    void push(const std::string& token);

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// Keeps the first max_len ids (entity descriptions: attribute order carries
// the salient fields first).
std::vector<int> truncate_head(std::vector<int> ids, int max_len);
// Keeps the last max_len ids (dialogue context: recent turns matter most).
std::vector<int> truncate_tail(std::vector<int> ids, int max_len);

}  // namespace mktod::text
