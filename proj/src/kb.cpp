#include "mktod/kb.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "mktod/text.hpp"

namespace mktod::kb {

std::string normalize_value(const std::string& raw) {
    std::string s;
    s.reserve(raw.size());
    bool pending_space = false;
    for (unsigned char c : raw) {
        if (std::isspace(c)) {
            pending_space = !s.empty();
            continue;
        }
        if (pending_space) {
            s += ' ';
            pending_space = false;
        }
        s += static_cast<char>(std::tolower(c));
    }
    std::size_t begin = 0, end = s.size();
    while (begin < end && std::ispunct(static_cast<unsigned char>(s[begin]))) ++begin;
    while (end > begin && std::ispunct(static_cast<unsigned char>(s[end - 1]))) --end;
    return s.substr(begin, end - begin);
}

std::string Entity::value_of(const std::string& attribute) const {
    for (const auto& [attr, value] : attributes) {
        if (attr == attribute) return normalize_value(value);
    }
    return "";
}

namespace {

void validate_entity(const Entity& e) {
    if (e.id.empty()) throw std::runtime_error("kb ingestion: entity with empty id");
    if (e.attributes.empty()) {
        throw std::runtime_error("kb ingestion: entity '" + e.id + "' has no attributes");
    }
    for (const auto& [attr, _] : e.attributes) {
        if (attr.empty()) {
            throw std::runtime_error("kb ingestion: entity '" + e.id + "' has an empty attribute name");
        }
    }
}

}  // namespace

KnowledgeBase KnowledgeBase::load(const std::string& path, const std::string& name_attribute) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read kb file: " + path);
    nlohmann::ordered_json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("kb ingestion: malformed JSON in " + path + ": " + e.what());
    }
    if (!doc.is_array()) throw std::runtime_error("kb ingestion: expected a JSON array in " + path);

    std::vector<Entity> entities;
    for (const auto& obj : doc) {
        if (!obj.is_object()) throw std::runtime_error("kb ingestion: non-object entry in " + path);
        Entity e;
        for (const auto& [key, value] : obj.items()) {
            if (key == "id") {
                if (!value.is_string()) throw std::runtime_error("kb ingestion: non-string id");
                e.id = value.get<std::string>();
                continue;
            }
            if (!value.is_string()) {
                throw std::runtime_error("kb ingestion: non-string value for attribute '" + key +
                                         "' of entity '" + obj.value("id", std::string("?")) + "'");
            }
            e.attributes.emplace_back(key, value.get<std::string>());
        }
        validate_entity(e);
        entities.push_back(std::move(e));
    }
    if (entities.empty()) throw std::runtime_error("kb ingestion: empty entity array in " + path);
    return from_entities(std::move(entities), name_attribute);
}

KnowledgeBase KnowledgeBase::from_entities(std::vector<Entity> entities,
                                           const std::string& name_attribute) {
    if (entities.empty()) throw std::runtime_error("kb ingestion: empty entity list");
    KnowledgeBase kb;
    kb.entities_ = std::move(entities);
    kb.name_attribute_ = name_attribute;
    kb.finish();
    return kb;
}

void KnowledgeBase::finish() {
    for (int i = 0; i < size(); ++i) {
        const Entity& e = entities_[static_cast<std::size_t>(i)];
        validate_entity(e);
        if (!id_index_.emplace(e.id, i).second) {
            throw std::runtime_error("kb ingestion: duplicate entity id '" + e.id + "'");
        }
        for (int a = 0; a < static_cast<int>(e.attributes.size()); ++a) {
            const std::string norm = normalize_value(e.attributes[static_cast<std::size_t>(a)].second);
            if (norm.empty()) continue;
            value_vocabulary_.insert(norm);
            patterns_.push_back({i, a, text::tokenize(norm)});
        }
    }
}

void KnowledgeBase::save(const std::string& path) const {
    nlohmann::ordered_json doc = nlohmann::ordered_json::array();
    for (const auto& e : entities_) {
        nlohmann::ordered_json obj;
        obj["id"] = e.id;
        for (const auto& [attr, value] : e.attributes) obj[attr] = value;
        doc.push_back(std::move(obj));
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write kb file: " + path);
    out << doc.dump(2) << "\n";
}

const Entity& KnowledgeBase::entity(int index) const {
    if (index < 0 || index >= size()) {
        throw std::out_of_range("kb entity index " + std::to_string(index) + " out of range [0," +
                                std::to_string(size()) + ")");
    }
    return entities_[static_cast<std::size_t>(index)];
}

int KnowledgeBase::index_of(const std::string& id) const {
    auto it = id_index_.find(id);
    return it == id_index_.end() ? -1 : it->second;
}

const Entity* KnowledgeBase::by_id(const std::string& id) const {
    const int i = index_of(id);
    return i < 0 ? nullptr : &entities_[static_cast<std::size_t>(i)];
}

std::string KnowledgeBase::name_value(int index) const {
    return entity(index).value_of(name_attribute_);
}

std::vector<std::string> KnowledgeBase::attribute_names() const {
    std::vector<std::string> names;
    for (const auto& e : entities_) {
        for (const auto& [attr, _] : e.attributes) {
            if (std::find(names.begin(), names.end(), attr) == names.end()) names.push_back(attr);
        }
    }
    return names;
}

std::string flatten_entity(const Entity& e) {
    std::string out;
    for (const auto& [attr, value] : e.attributes) {
        if (!out.empty()) out += " ; ";
        out += attr;
        const std::string norm = normalize_value(value);
        if (!norm.empty()) {
            out += ' ';
            out += norm;
        }
    }
    return out;
}

std::vector<Mention> find_value_mentions(const std::string& text, const KnowledgeBase& kb) {
    const auto tokens = text::tokenize(text);
    std::vector<Mention> out;
    if (tokens.empty()) return out;
    for (const auto& p : kb.patterns_) {
        if (p.tokens.empty() || p.tokens.size() > tokens.size()) continue;
        bool found = false;
        for (std::size_t start = 0; start + p.tokens.size() <= tokens.size() && !found; ++start) {
            found = std::equal(p.tokens.begin(), p.tokens.end(), tokens.begin() + start);
        }
        if (!found) continue;
        const Entity& e = kb.entity(p.entity_index);
        const auto& [attr, value] = e.attributes[static_cast<std::size_t>(p.attribute_index)];
        Mention m{e.id, attr, normalize_value(value)};
        if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(std::move(m));
    }
    return out;
}

}  // namespace mktod::kb
