#include "palign/zeroshot.hpp"

#include <algorithm>

#include "palign/errors.hpp"

namespace palign {

PromptMode parse_prompt_mode(const std::string& s) {
    if (s == "naive") return PromptMode::naive;
    if (s == "ek") return PromptMode::ek;
    if (s == "anomaly") return PromptMode::anomaly;
    throw ConfigError("unknown prompt mode \"" + s + "\" (expected naive|ek|anomaly)");
}

std::vector<ClassPrototype> class_prototypes(const PromptBank& bank,
                                             const TextFeaturizer& featurizer,
                                             const ModelState& model,
                                             const std::vector<Category>& categories,
                                             PromptMode mode) {
    std::vector<std::pair<Category, std::vector<std::string>>> groups;
    if (mode == PromptMode::anomaly) {
        groups.push_back({Category{0, "normal", "N"}, {"normal"}});
        groups.push_back({Category{1, "disease", "Dis"}, {"disease"}});
    } else {
        if (categories.empty()) throw ConfigError("class_prototypes: no categories given");
        for (const auto& cat : categories) {
            if (mode == PromptMode::naive) {
                groups.push_back({cat, {bank.naive_prompt(cat)}});
            } else {
                const auto& ek = bank.ek_prompts(cat);
                if (ek.empty())
                    throw ValidationError("class_prototypes: category \"" + cat.name +
                                          "\" has no expert-knowledge prompts");
                groups.push_back({cat, ek});
            }
        }
    }

    std::vector<ClassPrototype> out;
    out.reserve(groups.size());
    for (auto& [cat, prompts] : groups) {
        std::vector<VecD> embeddings;
        embeddings.reserve(prompts.size());
        for (const auto& prompt : prompts)
            embeddings.push_back(project_normalize(model.text_head, featurizer(prompt),
                                                   "prompt \"" + prompt + "\""));
        ClassPrototype proto;
        proto.category = cat;
        proto.embedding = normalized_mean(embeddings);
        proto.prompt_count = prompts.size();
        out.push_back(std::move(proto));
    }
    return out;
}

VecD zero_shot_logits(const ModelState& model, const VecD& image_embedding,
                      const std::vector<ClassPrototype>& prototypes) {
    if (prototypes.empty()) throw ConfigError("zero_shot_logits: no prototypes");
    const double tau = model.tau();
    VecD logits(prototypes.size());
    for (std::size_t c = 0; c < prototypes.size(); ++c) {
        if (prototypes[c].embedding.size() != image_embedding.size())
            throw ValidationError("zero_shot_logits: prototype dim mismatch");
        logits[c] = tau * dot(image_embedding, prototypes[c].embedding);
    }
    return logits;
}

ZeroShotPrediction predict_embedded(const ModelState& model, const VecD& image_embedding,
                                    const std::vector<ClassPrototype>& prototypes) {
    ZeroShotPrediction pred;
    pred.logits = zero_shot_logits(model, image_embedding, prototypes);
    pred.probabilities = softmax(pred.logits);
    std::size_t best = 0;
    for (std::size_t c = 1; c < pred.logits.size(); ++c)
        if (pred.logits[c] > pred.logits[best]) best = c;  // ties keep the lowest index
    pred.class_index = best;
    pred.class_id = prototypes[best].category.id;
    return pred;
}

ZeroShotPrediction predict(const ModelState& model, const VecD& image_feature,
                           const std::vector<ClassPrototype>& prototypes) {
    const VecD u = project_normalize(model.vision_head, image_feature, "image feature");
    return predict_embedded(model, u, prototypes);
}

}  // namespace palign
