#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace palign {

/// One category of the label vocabulary. Ids are dense indices assigned by
/// the registry (file order); zero-shot targets not present in a registry get
/// fresh ids past the registry size.
struct Category {
    int id = -1;
    std::string name;          // canonical lowercase, e.g. "mild diabetic retinopathy"
    std::string abbreviation;  // short manifest code, e.g. "mildDR"
};

/// Immutable abbreviation <-> name registry. Unknown abbreviations in
/// manifests are rejected rather than auto-created.
class CategoryRegistry {
public:
    static CategoryRegistry load(const std::string& path);
    static CategoryRegistry from_pairs(
        const std::vector<std::pair<std::string, std::string>>& abbrev_name_pairs);

    std::size_t size() const { return categories_.size(); }
    const std::vector<Category>& categories() const { return categories_; }
    const Category& at(int id) const;

    const Category* find_abbreviation(const std::string& abbrev) const;
    const Category* find_name(const std::string& name) const;

    /// Resolves an abbreviation or a full name; nullptr when unknown.
    const Category* resolve(const std::string& key) const;

private:
    std::vector<Category> categories_;
    std::unordered_map<std::string, int> by_abbrev_;
    std::unordered_map<std::string, int> by_name_;
};

}  // namespace palign
