#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "palign/categories.hpp"
#include "palign/rng.hpp"

namespace palign {

/// Category -> prompt text mappings: a naive "[CLS]" template plus per-category
/// expert-knowledge descriptions. Immutable after load; safe for concurrent
/// reads. Prompt identity is the exact string; no normalization is applied.
class PromptBank {
public:
    static constexpr const char* kDefaultNaiveTemplate = "A fundus photograph of [CLS]";
    static constexpr const char* kClsToken = "[CLS]";

    PromptBank() : naive_template_(kDefaultNaiveTemplate) {}
    explicit PromptBank(std::string naive_template);

    /// Parses the JSON bank format {"naive_template": str, "categories": {name: [desc...]}}.
    /// Throws FormatError on malformed input, ValidationError on duplicate keys
    /// or empty description strings.
    static PromptBank load(const std::string& path);
    static PromptBank parse(const std::string& text, const std::string& origin = "<string>");

    void add_category(const std::string& name, std::vector<std::string> descriptions);

    std::size_t category_count() const { return entries_.size(); }
    bool has_category(const std::string& name) const { return entries_.count(name) != 0; }
    const std::string& naive_template() const { return naive_template_; }

    /// Naive template with "[CLS]" replaced by the category name.
    std::string naive_prompt(const Category& cat) const;

    /// The category's expert-knowledge descriptions in file order.
    /// Throws ValidationError naming the category when absent.
    const std::vector<std::string>& ek_prompts(const Category& cat) const;

    /// Like ek_prompts but returns an empty list for categories without an
    /// entry; used by training where the naive prompt alone is a valid set.
    const std::vector<std::string>& ek_prompts_or_empty(const std::string& name) const;

    /// One prompt drawn uniformly from {naive} ∪ EK descriptions.
    std::string sample_training_prompt(const Category& cat, Rng& rng) const;

private:
    std::string naive_template_;
    std::unordered_map<std::string, std::vector<std::string>> entries_;
};

}  // namespace palign
