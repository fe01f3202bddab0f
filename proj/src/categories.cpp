#include "palign/categories.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "palign/errors.hpp"
#include "palign/io.hpp"

namespace palign {

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

CategoryRegistry CategoryRegistry::load(const std::string& path) {
    const std::string text = read_file(path);
    json_duplicate_key_check(text);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("registry " + path + ": " + e.what());
    }
    if (!doc.is_array()) throw FormatError("registry " + path + ": expected a JSON array");
    std::vector<std::pair<std::string, std::string>> pairs;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto& entry = doc[i];
        if (!entry.is_object() || !entry.contains("abbreviation") || !entry.contains("name") ||
            !entry["abbreviation"].is_string() || !entry["name"].is_string())
            throw FormatError("registry " + path + ": entry " + std::to_string(i) +
                              " must be {\"abbreviation\": str, \"name\": str}");
        pairs.emplace_back(entry["abbreviation"].get<std::string>(),
                           entry["name"].get<std::string>());
    }
    return from_pairs(pairs);
}

CategoryRegistry CategoryRegistry::from_pairs(
    const std::vector<std::pair<std::string, std::string>>& abbrev_name_pairs) {
    CategoryRegistry reg;
    for (const auto& [abbrev, name] : abbrev_name_pairs) {
        if (abbrev.empty() || name.empty())
            throw ValidationError("registry entries must have non-empty abbreviation and name");
        if (reg.by_abbrev_.count(abbrev))
            throw ValidationError("duplicate abbreviation in registry: " + abbrev);
        if (reg.by_name_.count(name))
            throw ValidationError("duplicate category name in registry: " + name);
        const int id = static_cast<int>(reg.categories_.size());
        reg.categories_.push_back(Category{id, name, abbrev});
        reg.by_abbrev_[abbrev] = id;
        reg.by_name_[name] = id;
    }
    return reg;
}

const Category& CategoryRegistry::at(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= categories_.size())
        throw ValidationError("category id out of range: " + std::to_string(id));
    return categories_[static_cast<std::size_t>(id)];
}

const Category* CategoryRegistry::find_abbreviation(const std::string& abbrev) const {
    auto it = by_abbrev_.find(abbrev);
    return it == by_abbrev_.end() ? nullptr : &categories_[static_cast<std::size_t>(it->second)];
}

const Category* CategoryRegistry::find_name(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : &categories_[static_cast<std::size_t>(it->second)];
}

const Category* CategoryRegistry::resolve(const std::string& key) const {
    if (const Category* c = find_abbreviation(key)) return c;
    return find_name(key);
}

}  // namespace palign
