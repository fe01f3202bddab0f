#include "palign/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "palign/errors.hpp"

namespace palign {

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be positive");
    if (weight_decay < 0.0 || !std::isfinite(weight_decay))
        throw ConfigError("weight_decay must be nonnegative");
    if (warmup_epochs < 0.0 || !std::isfinite(warmup_epochs))
        throw ConfigError("warmup_epochs must be nonnegative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
}

OptimizerState OptimizerState::zeros_like(const ModelState& model) {
    OptimizerState s;
    s.m_vision_w = MatD(model.vision_head.weights.rows(), model.vision_head.weights.cols());
    s.v_vision_w = s.m_vision_w;
    s.m_vision_b.assign(model.vision_head.bias.size(), 0.0);
    s.v_vision_b = s.m_vision_b;
    s.m_text_w = MatD(model.text_head.weights.rows(), model.text_head.weights.cols());
    s.v_text_w = s.m_text_w;
    s.m_text_b.assign(model.text_head.bias.size(), 0.0);
    s.v_text_b = s.m_text_b;
    return s;
}

double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                   double base_lr) {
    if (total_steps == 0 || step >= total_steps)
        throw ConfigError("lr_schedule: step must lie in [0, total_steps)");
    if (warmup_steps >= total_steps)
        throw ConfigError("lr_schedule: warmup_steps must be < total_steps");
    if (step < warmup_steps)
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    const double t = static_cast<double>(step - warmup_steps) /
                     static_cast<double>(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

namespace {

void adamw_block(double* p, const double* g, double* m, double* v, std::size_t n,
                 std::size_t step, double lr, double wd, const TrainConfig& cfg,
                 const char* block_name) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(g[i]))
            throw NumericalError(std::string("non-finite gradient in block ") + block_name);
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= lr * wd * p[i] + lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
}

}  // namespace

void adamw_step(ModelState& model, const LossGradients& grads, OptimizerState& opt, double lr,
                double weight_decay, const TrainConfig& cfg) {
    if (!grads.d_vision_weights.same_shape(model.vision_head.weights) ||
        !grads.d_text_weights.same_shape(model.text_head.weights) ||
        grads.d_vision_bias.size() != model.vision_head.bias.size() ||
        grads.d_text_bias.size() != model.text_head.bias.size())
        throw ValidationError("adamw_step: gradient shapes do not match the model");

    ++opt.step_count;
    const std::size_t t = opt.step_count;
    adamw_block(model.vision_head.weights.data().data(), grads.d_vision_weights.data().data(),
                opt.m_vision_w.data().data(), opt.v_vision_w.data().data(),
                model.vision_head.weights.size(), t, lr, weight_decay, cfg, "vision_head.weights");
    adamw_block(model.vision_head.bias.data(), grads.d_vision_bias.data(), opt.m_vision_b.data(),
                opt.v_vision_b.data(), model.vision_head.bias.size(), t, lr, weight_decay, cfg,
                "vision_head.bias");
    adamw_block(model.text_head.weights.data().data(), grads.d_text_weights.data().data(),
                opt.m_text_w.data().data(), opt.v_text_w.data().data(),
                model.text_head.weights.size(), t, lr, weight_decay, cfg, "text_head.weights");
    adamw_block(model.text_head.bias.data(), grads.d_text_bias.data(), opt.m_text_b.data(),
                opt.v_text_b.data(), model.text_head.bias.size(), t, lr, weight_decay, cfg,
                "text_head.bias");
    // log_tau: decoupled decay is deliberately not applied here.
    adamw_block(&model.log_tau, &grads.d_log_tau, &opt.m_log_tau, &opt.v_log_tau, 1, t, lr, 0.0,
                cfg, "log_tau");
    model.log_tau = clamp_log_tau(model.log_tau);
}

TrainResult train(const std::vector<TripletRecord>& dataset, const MatD& image_features,
                  const PromptBank& bank, const CategoryRegistry& registry,
                  const TextFeaturizer& featurizer, const TrainConfig& config, ModelState init) {
    config.validate();
    if (dataset.empty()) throw ConfigError("train: empty dataset");
    init.validate();
    for (const auto& rec : dataset) {
        if (rec.image_feature_index >= image_features.rows())
            throw ValidationError("train: record \"" + rec.sample_id +
                                  "\" indexes past the embedding file");
        registry.at(rec.label);  // throws on invalid label ids
    }
    if (image_features.cols() != init.vision_dim())
        throw ValidationError("train: image feature dim " + std::to_string(image_features.cols()) +
                              " does not match the vision head (" +
                              std::to_string(init.vision_dim()) + ")");

    const std::size_t n = dataset.size();
    const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = config.epochs * steps_per_epoch;
    std::size_t warmup_steps = static_cast<std::size_t>(
        std::llround(config.warmup_epochs * static_cast<double>(steps_per_epoch)));
    if (warmup_steps >= total_steps) warmup_steps = total_steps - 1;

    ModelState model = std::move(init);
    OptimizerState opt = OptimizerState::zeros_like(model);

    // The featurizer is deterministic, so text features are cached by prompt
    // string; sampling stays per-occurrence as required.
    std::unordered_map<std::string, VecD> text_cache;
    const auto featurize = [&](const std::string& prompt) -> const VecD& {
        auto it = text_cache.find(prompt);
        if (it != text_cache.end()) return it->second;
        VecD f = featurizer(prompt);
        if (f.size() != model.text_dim())
            throw ValidationError("train: featurizer dim " + std::to_string(f.size()) +
                                  " does not match the text head (" +
                                  std::to_string(model.text_dim()) + ")");
        return text_cache.emplace(prompt, std::move(f)).first->second;
    };

    TrainResult result;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng rng = make_stream_rng(config.seed, epoch);
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        rng.shuffle(order);

        double loss_sum = 0.0;
        double last_lr = 0.0;
        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t bs = std::min(config.batch_size, n - start);
            MatD X(bs, model.vision_dim());
            MatD Txt(bs, model.text_dim());
            std::vector<int> labels(bs);
            for (std::size_t b = 0; b < bs; ++b) {
                const TripletRecord& rec = dataset[order[start + b]];
                X.set_row(b, image_features.row_copy(rec.image_feature_index));
                const std::string prompt =
                    rec.raw_text ? *rec.raw_text
                                 : bank.sample_training_prompt(registry.at(rec.label), rng);
                Txt.set_row(b, featurize(prompt));
                labels[b] = rec.label;
            }

            LossGradients grads;
            if (config.precision == Precision::f32) {
                const auto ev = detail::eval_batch<float>(
                    model.vision_head.cast<float>(), model.text_head.cast<float>(),
                    X.cast<float>(), Txt.cast<float>(), labels,
                    static_cast<float>(model.log_tau));
                grads.d_vision_weights = ev.d_vision_weights.cast<double>();
                grads.d_vision_bias = to_double_vec(ev.d_vision_bias);
                grads.d_text_weights = ev.d_text_weights.cast<double>();
                grads.d_text_bias = to_double_vec(ev.d_text_bias);
                grads.d_log_tau = static_cast<double>(ev.d_log_tau);
                grads.loss_value = static_cast<double>(ev.loss);
            } else {
                grads = total_loss_and_grads(model, X, Txt, labels);
            }

            last_lr = lr_schedule(step, total_steps, warmup_steps, config.base_lr);
            adamw_step(model, grads, opt, last_lr, config.weight_decay, config);
            loss_sum += grads.loss_value / static_cast<double>(bs);
            ++step;
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.mean_loss = loss_sum / static_cast<double>(steps_per_epoch);
        stats.lr = last_lr;
        stats.tau = model.tau();
        result.trace.push_back(stats);
    }
    result.model = std::move(model);
    return result;
}

}  // namespace palign
