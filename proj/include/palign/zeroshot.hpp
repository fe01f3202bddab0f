#pragma once

#include <string>
#include <vector>

#include "palign/embedding.hpp"
#include "palign/prompt_bank.hpp"
#include "palign/trainer.hpp"

namespace palign {

/// Per-category unit text embedding used as the classification anchor:
/// the renormalized centroid of the category's prompt embeddings.
struct ClassPrototype {
    Category category;
    VecD embedding;          // unit norm
    std::size_t prompt_count = 0;
};

enum class PromptMode { naive, ek, anomaly };

PromptMode parse_prompt_mode(const std::string& s);

/// Builds one prototype per category. naive: single templated prompt; ek: the
/// category's expert-knowledge descriptions (P >= 1 required); anomaly:
/// ignores the category list and uses exactly the prompts "normal"/"disease".
std::vector<ClassPrototype> class_prototypes(const PromptBank& bank,
                                             const TextFeaturizer& featurizer,
                                             const ModelState& model,
                                             const std::vector<Category>& categories,
                                             PromptMode mode);

struct ZeroShotPrediction {
    int class_id = -1;       // argmax of logits, ties broken by lowest index
    std::size_t class_index = 0;  // position in the prototype list
    VecD probabilities;      // softmax over tau-scaled similarities
    VecD logits;             // tau-scaled cosine similarities
};

/// Temperature-scaled similarities of a projected image against prototypes;
/// shared by predict and the adapters so reductions are logit-identical.
VecD zero_shot_logits(const ModelState& model, const VecD& image_embedding,
                      const std::vector<ClassPrototype>& prototypes);

ZeroShotPrediction predict(const ModelState& model, const VecD& image_feature,
                           const std::vector<ClassPrototype>& prototypes);

/// predict() on an already projected-normalized image embedding.
ZeroShotPrediction predict_embedded(const ModelState& model, const VecD& image_embedding,
                                    const std::vector<ClassPrototype>& prototypes);

}  // namespace palign
