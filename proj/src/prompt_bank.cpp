#include "palign/prompt_bank.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "palign/errors.hpp"
#include "palign/io.hpp"

namespace palign {

namespace {

void check_template(const std::string& tmpl) {
    const std::size_t first = tmpl.find(PromptBank::kClsToken);
    if (first == std::string::npos ||
        tmpl.find(PromptBank::kClsToken, first + 1) != std::string::npos)
        throw ValidationError("naive_template must contain exactly one \"[CLS]\" token");
}

}  // namespace

PromptBank::PromptBank(std::string naive_template) : naive_template_(std::move(naive_template)) {
    check_template(naive_template_);
}

PromptBank PromptBank::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open prompt bank: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
}

PromptBank PromptBank::parse(const std::string& text, const std::string& origin) {
    json_duplicate_key_check(text);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("prompt bank " + origin + ": " + e.what());
    }
    if (!doc.is_object())
        throw FormatError("prompt bank " + origin + ": top level must be a JSON object");

    PromptBank bank;
    if (doc.contains("naive_template")) {
        if (!doc["naive_template"].is_string())
            throw FormatError("prompt bank " + origin + ": \"naive_template\" must be a string");
        bank.naive_template_ = doc["naive_template"].get<std::string>();
    }
    try {
        check_template(bank.naive_template_);
    } catch (const ValidationError& e) {
        throw ValidationError("prompt bank " + origin + ": " + e.what());
    }

    if (doc.contains("categories")) {
        const auto& cats = doc["categories"];
        if (!cats.is_object())
            throw FormatError("prompt bank " + origin + ": \"categories\" must be an object");
        for (auto it = cats.begin(); it != cats.end(); ++it) {
            if (!it.value().is_array())
                throw FormatError("prompt bank " + origin + ": descriptions of \"" + it.key() +
                                  "\" must be an array");
            std::vector<std::string> descs;
            for (const auto& d : it.value()) {
                if (!d.is_string())
                    throw FormatError("prompt bank " + origin + ": non-string description under \"" +
                                      it.key() + "\"");
                descs.push_back(d.get<std::string>());
            }
            bank.add_category(it.key(), std::move(descs));
        }
    }
    return bank;
}

void PromptBank::add_category(const std::string& name, std::vector<std::string> descriptions) {
    if (name.empty()) throw ValidationError("prompt bank: empty category name");
    for (const auto& d : descriptions)
        if (d.empty())
            throw ValidationError("prompt bank: empty description for category \"" + name + "\"");
    if (entries_.count(name))
        throw ValidationError("prompt bank: duplicate category key \"" + name + "\"");
    entries_.emplace(name, std::move(descriptions));
}

std::string PromptBank::naive_prompt(const Category& cat) const {
    std::string out = naive_template_;
    out.replace(out.find(kClsToken), std::string(kClsToken).size(), cat.name);
    return out;
}

const std::vector<std::string>& PromptBank::ek_prompts(const Category& cat) const {
    auto it = entries_.find(cat.name);
    if (it == entries_.end())
        throw ValidationError("prompt bank: unknown category \"" + cat.name + "\"");
    return it->second;
}

const std::vector<std::string>& PromptBank::ek_prompts_or_empty(const std::string& name) const {
    static const std::vector<std::string> kEmpty;
    auto it = entries_.find(name);
    return it == entries_.end() ? kEmpty : it->second;
}

std::string PromptBank::sample_training_prompt(const Category& cat, Rng& rng) const {
    const auto& ek = ek_prompts_or_empty(cat.name);
    const std::size_t pick = static_cast<std::size_t>(rng.uniform_int(ek.size() + 1));
    return pick == 0 ? naive_prompt(cat) : ek[pick - 1];
}

}  // namespace palign
