#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "palign/embedding.hpp"
#include "palign/zeroshot.hpp"

namespace palign {

/// Which frozen representation a transfer head consumes.
enum class FeatureChoice { vision, projected, projected_normalized };

FeatureChoice parse_feature_choice(const std::string& s);
std::string to_string(FeatureChoice c);

/// vision: the raw feature unchanged; projected: affine head output;
/// projected_normalized: unit-norm joint embedding.
VecD extract_features(const ModelState& model, const VecD& raw, FeatureChoice choice);

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct LinearProbe {
    MatD weights;  // n_classes x D
    VecD bias;     // n_classes
    FeatureChoice feature_choice = FeatureChoice::vision;
    double l2_lambda = 0.0;
};

struct ProbeFitConfig {
    double l2_lambda = -1.0;  // < 0 means the 1/(k * n_classes) default
    std::size_t max_iters = 5000;
    double grad_tol = 1e-6;
    std::uint64_t seed = 0;
};

struct ProbeFitResult {
    LinearProbe probe;
    VecD objective_trace;  // objective after each accepted step; non-increasing
};

/// Multinomial logistic regression (mean cross-entropy + (lambda/2)||W||^2)
/// solved by full-batch gradient descent with backtracking line search.
/// Throws ValidationError listing classes absent from the support set.
ProbeFitResult fit_linear_probe(const MatD& features, const std::vector<int>& labels,
                                std::size_t n_classes, const ProbeFitConfig& config,
                                FeatureChoice choice = FeatureChoice::vision);

struct ProbePrediction {
    int class_index = -1;
    VecD probabilities;
};

ProbePrediction predict_linear_probe(const LinearProbe& probe, const VecD& feature);

// ---------------------------------------------------------------------------
// Tip-Adapter
// ---------------------------------------------------------------------------

/// Key/value cache over the support set: keys are projected-normalized support
/// embeddings, values one-hot labels. alpha blends the cache into the
/// zero-shot logits, beta sharpens the exp(-beta(1-sim)) affinity.
struct TipCache {
    MatD keys;    // n_support x joint_dim, unit rows
    MatD values;  // n_support x n_classes, one-hot rows
    double alpha = 1.0;
    double beta = 5.5;
    bool keys_trainable = false;
};

TipCache build_tip_cache(const ModelState& model, const MatD& support_vision_features,
                         const std::vector<int>& support_labels, std::size_t n_classes,
                         double alpha = 1.0, double beta = 5.5, bool keys_trainable = false);

struct TipPrediction {
    int class_index = -1;
    VecD logits;
};

/// logits = zero_shot_logits + alpha * exp(-beta * (1 - query·keys^T)) * values.
TipPrediction tip_adapter_predict(const TipCache& cache, const ModelState& model,
                                  const std::vector<ClassPrototype>& prototypes,
                                  const VecD& image_feature);

struct AdapterFitConfig {
    double lr = 1e-3;
    std::size_t epochs = 20;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
};

struct TipFitResult {
    TipCache cache;
    VecD loss_trace;  // support cross-entropy per epoch, element 0 = before any step
};

/// Fine-tunes the cache keys (values fixed) by full-batch AdamW on the support
/// cross-entropy; keys are renormalized after each step and the best-loss
/// snapshot is returned. Requires cache.keys_trainable.
TipFitResult fit_tip_adapter_f(const TipCache& cache, const ModelState& model,
                               const std::vector<ClassPrototype>& prototypes,
                               const MatD& support_vision_features,
                               const std::vector<int>& support_labels,
                               const AdapterFitConfig& config);

// ---------------------------------------------------------------------------
// CLIP-Adapter
// ---------------------------------------------------------------------------

/// Residual bottleneck MLP over the joint image embedding:
/// adapted = ratio * up·relu(down·u) + (1 - ratio) * u, renormalized.
struct ClipAdapterHead {
    MatD down;  // r x D
    MatD up;    // D x r
    double residual_ratio = 0.2;
};

/// down random (seeded), up zero-initialized so the untrained head reproduces
/// zero-shot predictions exactly.
ClipAdapterHead init_clip_adapter(std::size_t joint_dim, std::size_t bottleneck,
                                  double residual_ratio, std::uint64_t seed);

TipPrediction clip_adapter_predict(const ClipAdapterHead& head, const ModelState& model,
                                   const std::vector<ClassPrototype>& prototypes,
                                   const VecD& image_feature);

struct ClipAdapterFitResult {
    ClipAdapterHead head;
    VecD loss_trace;
};

/// Optimizes the bottleneck MLP on support cross-entropy with AdamW; keeps the
/// snapshot with the best (accuracy, loss) on the support set so the fitted
/// head never predicts worse than zero-shot there.
ClipAdapterFitResult fit_clip_adapter(const ClipAdapterHead& head, const ModelState& model,
                                      const std::vector<ClassPrototype>& prototypes,
                                      const MatD& support_vision_features,
                                      const std::vector<int>& support_labels,
                                      const AdapterFitConfig& config);

}  // namespace palign
