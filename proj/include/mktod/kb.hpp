#pragma once

#include <string>
#include <unordered_map>
#include <set>
#include <vector>

// Knowledge base: an ordered list of flat attribute-value entities plus the
// value matcher shared by entity metrics and co-occurrence tagging.
namespace mktod::kb {

// Lowercase, trim, collapse internal whitespace, strip surrounding (not
// interior) punctuation: "  Pizza Hut! " -> "pizza hut", "18:30" -> "18:30".
std::string normalize_value(const std::string& raw);

struct Entity {
    std::string id;
    std::vector<std::pair<std::string, std::string>> attributes;  // file order, raw values

    // Normalized value of an attribute, or empty string when absent.
    std::string value_of(const std::string& attribute) const;
};

struct Mention {
    std::string entity_id;
    std::string attribute;
    std::string value;  // normalized

    bool operator==(const Mention&) const = default;
    auto operator<=>(const Mention&) const = default;
};

class KnowledgeBase {
public:
    // File format: UTF-8 JSON array of flat string-valued objects with a
    // mandatory unique "id" field.
    static KnowledgeBase load(const std::string& path, const std::string& name_attribute = "name");
    static KnowledgeBase from_entities(std::vector<Entity> entities,
                                       const std::string& name_attribute = "name");
    void save(const std::string& path) const;

    int size() const { return static_cast<int>(entities_.size()); }
    const Entity& entity(int index) const;
    const std::vector<Entity>& entities() const { return entities_; }
    int index_of(const std::string& id) const;  // -1 when absent
    const Entity* by_id(const std::string& id) const;

    const std::string& name_attribute() const { return name_attribute_; }
    // Normalized name value of an entity ("" when it lacks the attribute).
    std::string name_value(int index) const;

    const std::set<std::string>& value_vocabulary() const { return value_vocabulary_; }
    std::vector<std::string> attribute_names() const;

private:
    struct ValuePattern {
        int entity_index;
        int attribute_index;
        std::vector<std::string> tokens;  // tokenized normalized value
    };

    void finish();

    std::vector<Entity> entities_;
    std::string name_attribute_;
    std::unordered_map<std::string, int> id_index_;
    std::set<std::string> value_vocabulary_;
    std::vector<ValuePattern> patterns_;

    friend std::vector<Mention> find_value_mentions(const std::string& text,
                                                    const KnowledgeBase& kb);
};

// "attr1 value1 ; attr2 value2" in stored attribute order, normalized values.
std::string flatten_entity(const Entity& e);

// Every normalized KB value present in the text as a contiguous token span,
// in (entity, attribute) order, deduplicated.
std::vector<Mention> find_value_mentions(const std::string& text, const KnowledgeBase& kb);

}  // namespace mktod::kb
