#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "palign/contrastive.hpp"
#include "palign/embedding.hpp"
#include "palign/io_types.hpp"
#include "palign/prompt_bank.hpp"

namespace palign {

enum class Precision { f32, f64 };

struct TrainConfig {
    std::size_t batch_size = 128;
    std::size_t epochs = 15;
    double base_lr = 1e-4;
    double weight_decay = 1e-2;
    double warmup_epochs = 1.0;
    std::uint64_t seed = 0;
    Precision precision = Precision::f64;

    // AdamW internals; standard defaults, exposed rather than hidden.
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

/// AdamW first/second moments per parameter block.
struct OptimizerState {
    MatD m_vision_w, v_vision_w;
    VecD m_vision_b, v_vision_b;
    MatD m_text_w, v_text_w;
    VecD m_text_b, v_text_b;
    double m_log_tau = 0.0, v_log_tau = 0.0;
    std::size_t step_count = 0;

    static OptimizerState zeros_like(const ModelState& model);
};

/// Linear ramp to base_lr over warmup_steps (first step nonzero), then cosine
/// decay to zero over the remaining steps.
double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                   double base_lr);

/// Decoupled-weight-decay Adam update over all model blocks. Weight decay is
/// not applied to log_tau; log_tau is clamped after the step. Throws
/// NumericalError naming the block on non-finite gradients.
void adamw_step(ModelState& model, const LossGradients& grads, OptimizerState& opt, double lr,
                double weight_decay, const TrainConfig& cfg);

using TextFeaturizer = std::function<VecD(const std::string&)>;

struct EpochStats {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double lr = 0.0;  // learning rate of the epoch's final step
    double tau = 0.0;
};

struct TrainResult {
    ModelState model;
    std::vector<EpochStats> trace;
};

/// Mini-batch optimization of the bidirectional objective. Per epoch the
/// dataset order and per-sample prompt draws come from a stream seeded by
/// (config.seed, epoch); runs are bit-reproducible in f64 mode. Records with
/// raw text use it verbatim; categorical records draw a prompt per occurrence.
TrainResult train(const std::vector<TripletRecord>& dataset, const MatD& image_features,
                  const PromptBank& bank, const CategoryRegistry& registry,
                  const TextFeaturizer& featurizer, const TrainConfig& config, ModelState init);

}  // namespace palign
