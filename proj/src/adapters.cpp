#include "palign/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "palign/errors.hpp"

namespace palign {

FeatureChoice parse_feature_choice(const std::string& s) {
    if (s == "vision") return FeatureChoice::vision;
    if (s == "proj" || s == "projected") return FeatureChoice::projected;
    if (s == "proj-norm" || s == "projected_normalized") return FeatureChoice::projected_normalized;
    throw ConfigError("unknown feature choice \"" + s + "\" (expected vision|proj|proj-norm)");
}

std::string to_string(FeatureChoice c) {
    switch (c) {
        case FeatureChoice::vision: return "vision";
        case FeatureChoice::projected: return "projected";
        case FeatureChoice::projected_normalized: return "projected_normalized";
    }
    return "?";
}

VecD extract_features(const ModelState& model, const VecD& raw, FeatureChoice choice) {
    switch (choice) {
        case FeatureChoice::vision:
            return raw;
        case FeatureChoice::projected: {
            if (raw.size() != model.vision_dim())
                throw ValidationError("extract_features: input dim mismatch");
            VecD p(model.joint_dim());
            for (std::size_t r = 0; r < p.size(); ++r) {
                double acc = model.vision_head.bias[r];
                const double* w = model.vision_head.weights.row(r);
                for (std::size_t c = 0; c < raw.size(); ++c) acc += w[c] * raw[c];
                p[r] = acc;
            }
            return p;
        }
        case FeatureChoice::projected_normalized:
            return project_normalize(model.vision_head, raw, "adapter input");
    }
    throw ConfigError("extract_features: bad feature choice");
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

namespace {

struct ProbeObjective {
    const MatD& X;
    const std::vector<int>& y;
    std::size_t n_classes;
    double lambda;

    double value(const MatD& W, const VecD& b) const {
        const std::size_t n = X.rows();
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            VecD scores(n_classes);
            for (std::size_t k = 0; k < n_classes; ++k) {
                double acc = b[k];
                const double* w = W.row(k);
                for (std::size_t c = 0; c < X.cols(); ++c) acc += w[c] * X(i, c);
                scores[k] = acc;
            }
            const double mx = *std::max_element(scores.begin(), scores.end());
            double sum = 0.0;
            for (double s : scores) sum += std::exp(s - mx);
            loss += (mx + std::log(sum)) - scores[static_cast<std::size_t>(y[i])];
        }
        loss /= static_cast<double>(n);
        double reg = 0.0;
        for (double w : W.data()) reg += w * w;
        return loss + 0.5 * lambda * reg;
    }

    void gradient(const MatD& W, const VecD& b, MatD& dW, VecD& db) const {
        const std::size_t n = X.rows();
        dW = MatD(W.rows(), W.cols());
        db.assign(b.size(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            VecD scores(n_classes);
            for (std::size_t k = 0; k < n_classes; ++k) {
                double acc = b[k];
                const double* w = W.row(k);
                for (std::size_t c = 0; c < X.cols(); ++c) acc += w[c] * X(i, c);
                scores[k] = acc;
            }
            const VecD p = softmax(scores);
            for (std::size_t k = 0; k < n_classes; ++k) {
                const double g =
                    (p[k] - (static_cast<std::size_t>(y[i]) == k ? 1.0 : 0.0)) /
                    static_cast<double>(n);
                db[k] += g;
                double* dw = dW.row(k);
                for (std::size_t c = 0; c < X.cols(); ++c) dw[c] += g * X(i, c);
            }
        }
        for (std::size_t i = 0; i < dW.size(); ++i) dW.data()[i] += lambda * W.data()[i];
    }
};

}  // namespace

ProbeFitResult fit_linear_probe(const MatD& features, const std::vector<int>& labels,
                                std::size_t n_classes, const ProbeFitConfig& config,
                                FeatureChoice choice) {
    if (features.rows() == 0 || features.rows() != labels.size())
        throw ValidationError("fit_linear_probe: feature/label counts differ or are empty");
    if (n_classes == 0) throw ConfigError("fit_linear_probe: n_classes must be positive");

    std::set<int> seen(labels.begin(), labels.end());
    std::string missing;
    for (std::size_t k = 0; k < n_classes; ++k)
        if (!seen.count(static_cast<int>(k))) missing += (missing.empty() ? "" : ", ") + std::to_string(k);
    if (!missing.empty())
        throw ValidationError("fit_linear_probe: classes absent from support: " + missing);
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= n_classes)
            throw ValidationError("fit_linear_probe: label out of range: " + std::to_string(l));

    const double lambda =
        config.l2_lambda >= 0.0 ? config.l2_lambda : 1.0 / static_cast<double>(features.rows());
    ProbeObjective obj{features, labels, n_classes, lambda};

    MatD W(n_classes, features.cols());
    VecD b(n_classes, 0.0);

    ProbeFitResult result;
    double fx = obj.value(W, b);
    result.objective_trace.push_back(fx);

    double step = 1.0;
    MatD dW;
    VecD db;
    for (std::size_t it = 0; it < config.max_iters; ++it) {
        obj.gradient(W, b, dW, db);
        double gnorm2 = 0.0;
        for (double g : dW.data()) gnorm2 += g * g;
        for (double g : db) gnorm2 += g * g;
        if (std::sqrt(gnorm2) < config.grad_tol) break;

        // Backtracking line search (Armijo). The accepted step seeds the next
        // iteration so well-conditioned problems take full steps.
        step = std::min(step * 2.0, 1e8);
        bool accepted = false;
        for (int halvings = 0; halvings < 80; ++halvings) {
            MatD Wc = W;
            VecD bc = b;
            for (std::size_t i = 0; i < Wc.size(); ++i) Wc.data()[i] -= step * dW.data()[i];
            for (std::size_t i = 0; i < bc.size(); ++i) bc[i] -= step * db[i];
            const double fc = obj.value(Wc, bc);
            if (fc <= fx - 1e-4 * step * gnorm2) {
                W = std::move(Wc);
                b = std::move(bc);
                fx = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // step underflow: gradient noise floor reached
        result.objective_trace.push_back(fx);
    }

    result.probe.weights = std::move(W);
    result.probe.bias = std::move(b);
    result.probe.feature_choice = choice;
    result.probe.l2_lambda = lambda;
    return result;
}

ProbePrediction predict_linear_probe(const LinearProbe& probe, const VecD& feature) {
    if (feature.size() != probe.weights.cols())
        throw ValidationError("predict_linear_probe: feature dim mismatch");
    VecD scores(probe.weights.rows());
    for (std::size_t k = 0; k < scores.size(); ++k) {
        double acc = probe.bias[k];
        const double* w = probe.weights.row(k);
        for (std::size_t c = 0; c < feature.size(); ++c) acc += w[c] * feature[c];
        scores[k] = acc;
    }
    ProbePrediction pred;
    pred.probabilities = softmax(scores);
    std::size_t best = 0;
    for (std::size_t k = 1; k < scores.size(); ++k)
        if (scores[k] > scores[best]) best = k;
    pred.class_index = static_cast<int>(best);
    return pred;
}

// ---------------------------------------------------------------------------
// Tip-Adapter
// ---------------------------------------------------------------------------

TipCache build_tip_cache(const ModelState& model, const MatD& support_vision_features,
                         const std::vector<int>& support_labels, std::size_t n_classes,
                         double alpha, double beta, bool keys_trainable) {
    const std::size_t n = support_vision_features.rows();
    if (n == 0 || n != support_labels.size())
        throw ValidationError("build_tip_cache: empty support or label count mismatch");
    if (alpha < 0.0 || beta < 0.0) throw ConfigError("build_tip_cache: alpha/beta must be >= 0");
    TipCache cache;
    cache.keys = MatD(n, model.joint_dim());
    cache.values = MatD(n, n_classes);
    for (std::size_t s = 0; s < n; ++s) {
        const VecD u = project_normalize(model.vision_head, support_vision_features.row_copy(s),
                                         "support sample " + std::to_string(s));
        cache.keys.set_row(s, u);
        const int y = support_labels[s];
        if (y < 0 || static_cast<std::size_t>(y) >= n_classes)
            throw ValidationError("build_tip_cache: label out of range: " + std::to_string(y));
        cache.values(s, static_cast<std::size_t>(y)) = 1.0;
    }
    cache.alpha = alpha;
    cache.beta = beta;
    cache.keys_trainable = keys_trainable;
    return cache;
}

namespace {

VecD tip_logits(const TipCache& cache, const ModelState& model,
                const std::vector<ClassPrototype>& prototypes, const VecD& query) {
    VecD logits = zero_shot_logits(model, query, prototypes);
    if (logits.size() != cache.values.cols())
        throw ValidationError("tip_adapter: cache class count does not match the prototypes");
    for (std::size_t m = 0; m < cache.keys.rows(); ++m) {
        double a = 0.0;
        const double* key = cache.keys.row(m);
        for (std::size_t r = 0; r < query.size(); ++r) a += key[r] * query[r];
        const double w = cache.alpha * std::exp(-cache.beta * (1.0 - a));
        for (std::size_t k = 0; k < logits.size(); ++k) logits[k] += w * cache.values(m, k);
    }
    return logits;
}

int argmax_lowest(const VecD& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return static_cast<int>(best);
}

}  // namespace

TipPrediction tip_adapter_predict(const TipCache& cache, const ModelState& model,
                                  const std::vector<ClassPrototype>& prototypes,
                                  const VecD& image_feature) {
    if (cache.keys.rows() == 0) throw ValidationError("tip_adapter_predict: empty cache");
    const VecD query = project_normalize(model.vision_head, image_feature, "query image");
    TipPrediction pred;
    pred.logits = tip_logits(cache, model, prototypes, query);
    pred.class_index = argmax_lowest(pred.logits);
    return pred;
}

TipFitResult fit_tip_adapter_f(const TipCache& cache, const ModelState& model,
                               const std::vector<ClassPrototype>& prototypes,
                               const MatD& support_vision_features,
                               const std::vector<int>& support_labels,
                               const AdapterFitConfig& config) {
    if (!cache.keys_trainable)
        throw ConfigError("fit_tip_adapter_f: cache was built with keys_trainable=false");
    const std::size_t n = support_vision_features.rows();
    if (n == 0 || n != support_labels.size())
        throw ValidationError("fit_tip_adapter_f: empty support or label count mismatch");

    MatD Q(n, model.joint_dim());
    for (std::size_t s = 0; s < n; ++s)
        Q.set_row(s, project_normalize(model.vision_head, support_vision_features.row_copy(s),
                                       "support sample " + std::to_string(s)));

    TipCache current = cache;
    const std::size_t n_classes = cache.values.cols();

    const auto support_loss = [&](const TipCache& c) {
        double loss = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            const VecD logits = tip_logits(c, model, prototypes, Q.row_copy(s));
            const VecD p = softmax(logits);
            loss -= std::log(std::max(p[static_cast<std::size_t>(support_labels[s])], 1e-300));
        }
        return loss / static_cast<double>(n);
    };

    TipFitResult result;
    result.loss_trace.push_back(support_loss(current));
    TipCache best = current;
    double best_loss = result.loss_trace[0];

    MatD m(current.keys.rows(), current.keys.cols()), v(current.keys.rows(), current.keys.cols());
    for (std::size_t step = 1; step <= config.epochs; ++step) {
        // d CE / d key_m = alpha*beta*exp(-beta(1-q·k_m)) * (g·values_m) * q, summed
        // over support queries q with softmax error g.
        MatD dK(current.keys.rows(), current.keys.cols());
        for (std::size_t s = 0; s < n; ++s) {
            const VecD q = Q.row_copy(s);
            const VecD logits = tip_logits(current, model, prototypes, q);
            const VecD p = softmax(logits);
            for (std::size_t mrow = 0; mrow < current.keys.rows(); ++mrow) {
                double aff = 0.0;
                const double* key = current.keys.row(mrow);
                for (std::size_t r = 0; r < q.size(); ++r) aff += key[r] * q[r];
                double gv = 0.0;
                for (std::size_t k = 0; k < n_classes; ++k) {
                    const double g = p[k] - (static_cast<std::size_t>(support_labels[s]) == k);
                    gv += g * current.values(mrow, k);
                }
                const double coeff = current.alpha * current.beta *
                                     std::exp(-current.beta * (1.0 - aff)) * gv /
                                     static_cast<double>(n);
                double* drow = dK.row(mrow);
                for (std::size_t r = 0; r < q.size(); ++r) drow[r] += coeff * q[r];
            }
        }

        const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(step));
        for (std::size_t i = 0; i < current.keys.size(); ++i) {
            const double g = dK.data()[i];
            if (!std::isfinite(g)) throw NumericalError("fit_tip_adapter_f: non-finite gradient");
            m.data()[i] = 0.9 * m.data()[i] + 0.1 * g;
            v.data()[i] = 0.999 * v.data()[i] + 0.001 * g * g;
            current.keys.data()[i] -=
                config.lr * config.weight_decay * current.keys.data()[i] +
                config.lr * (m.data()[i] / bc1) / (std::sqrt(v.data()[i] / bc2) + 1e-8);
        }
        // Keys stay on the unit sphere, matching the cache invariant.
        for (std::size_t mrow = 0; mrow < current.keys.rows(); ++mrow) {
            double* row = current.keys.row(mrow);
            double nn = 0.0;
            for (std::size_t r = 0; r < current.keys.cols(); ++r) nn += row[r] * row[r];
            nn = std::sqrt(nn);
            if (!(nn > 0.0)) throw NumericalError("fit_tip_adapter_f: key collapsed to zero");
            for (std::size_t r = 0; r < current.keys.cols(); ++r) row[r] /= nn;
        }

        const double loss = support_loss(current);
        result.loss_trace.push_back(loss);
        if (loss < best_loss) {
            best_loss = loss;
            best = current;
        }
    }

    result.cache = std::move(best);
    return result;
}

// ---------------------------------------------------------------------------
// CLIP-Adapter
// ---------------------------------------------------------------------------

ClipAdapterHead init_clip_adapter(std::size_t joint_dim, std::size_t bottleneck,
                                  double residual_ratio, std::uint64_t seed) {
    if (bottleneck == 0) throw ConfigError("init_clip_adapter: bottleneck must be >= 1");
    if (residual_ratio < 0.0 || residual_ratio > 1.0)
        throw ConfigError("init_clip_adapter: residual_ratio must lie in [0, 1]");
    ClipAdapterHead head;
    head.down = MatD(bottleneck, joint_dim);
    head.up = MatD(joint_dim, bottleneck);  // zero: the fresh head is an exact no-op
    head.residual_ratio = residual_ratio;
    Rng rng = make_stream_rng(seed, 0xC11BAD);
    const double bound = 1.0 / std::sqrt(static_cast<double>(joint_dim));
    for (auto& w : head.down.data()) w = rng.uniform(-bound, bound);
    return head;
}

namespace {

struct ClipForward {
    VecD h;        // relu(down·u)
    VecD pre;      // down·u before relu
    VecD adapted;  // unit-norm adapted embedding
    double wnorm = 0.0;
    VecD w;        // pre-normalization mix
};

ClipForward clip_forward(const ClipAdapterHead& head, const VecD& u) {
    ClipForward f;
    const std::size_t r = head.down.rows();
    const std::size_t d = head.down.cols();
    if (u.size() != d) throw ValidationError("clip_adapter: embedding dim mismatch");
    f.pre.assign(r, 0.0);
    f.h.assign(r, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        const double* w = head.down.row(i);
        for (std::size_t c = 0; c < d; ++c) acc += w[c] * u[c];
        f.pre[i] = acc;
        f.h[i] = acc > 0.0 ? acc : 0.0;
    }
    f.w.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        const double* w = head.up.row(i);
        for (std::size_t c = 0; c < r; ++c) acc += w[c] * f.h[c];
        f.w[i] = head.residual_ratio * acc + (1.0 - head.residual_ratio) * u[i];
    }
    f.wnorm = norm2(f.w);
    if (!(f.wnorm > 0.0))
        throw NumericalError("clip_adapter: adapted embedding has zero norm");
    f.adapted.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) f.adapted[i] = f.w[i] / f.wnorm;
    return f;
}

}  // namespace

TipPrediction clip_adapter_predict(const ClipAdapterHead& head, const ModelState& model,
                                   const std::vector<ClassPrototype>& prototypes,
                                   const VecD& image_feature) {
    const VecD u = project_normalize(model.vision_head, image_feature, "query image");
    const ClipForward f = clip_forward(head, u);
    TipPrediction pred;
    pred.logits = zero_shot_logits(model, f.adapted, prototypes);
    pred.class_index = argmax_lowest(pred.logits);
    return pred;
}

ClipAdapterFitResult fit_clip_adapter(const ClipAdapterHead& head, const ModelState& model,
                                      const std::vector<ClassPrototype>& prototypes,
                                      const MatD& support_vision_features,
                                      const std::vector<int>& support_labels,
                                      const AdapterFitConfig& config) {
    const std::size_t n = support_vision_features.rows();
    if (n == 0 || n != support_labels.size())
        throw ValidationError("fit_clip_adapter: empty support or label count mismatch");

    MatD U(n, model.joint_dim());
    for (std::size_t s = 0; s < n; ++s)
        U.set_row(s, project_normalize(model.vision_head, support_vision_features.row_copy(s),
                                       "support sample " + std::to_string(s)));
    const double tau = model.tau();

    const auto evaluate = [&](const ClipAdapterHead& h) {
        double loss = 0.0;
        std::size_t correct = 0;
        for (std::size_t s = 0; s < n; ++s) {
            const ClipForward f = clip_forward(h, U.row_copy(s));
            const VecD logits = zero_shot_logits(model, f.adapted, prototypes);
            const VecD p = softmax(logits);
            loss -= std::log(std::max(p[static_cast<std::size_t>(support_labels[s])], 1e-300));
            if (argmax_lowest(logits) == support_labels[s]) ++correct;
        }
        return std::pair<double, std::size_t>{loss / static_cast<double>(n), correct};
    };

    ClipAdapterHead current = head;
    ClipAdapterFitResult result;
    auto [loss0, acc0] = evaluate(current);
    result.loss_trace.push_back(loss0);
    ClipAdapterHead best = current;
    double best_loss = loss0;
    std::size_t best_acc = acc0;

    MatD m_down(current.down.rows(), current.down.cols());
    MatD v_down(current.down.rows(), current.down.cols());
    MatD m_up(current.up.rows(), current.up.cols());
    MatD v_up(current.up.rows(), current.up.cols());

    const std::size_t r = current.down.rows();
    const std::size_t d = current.down.cols();

    for (std::size_t step = 1; step <= config.epochs; ++step) {
        MatD d_down(r, d), d_up(d, r);
        for (std::size_t s = 0; s < n; ++s) {
            const VecD u = U.row_copy(s);
            const ClipForward f = clip_forward(current, u);
            const VecD logits = zero_shot_logits(model, f.adapted, prototypes);
            const VecD p = softmax(logits);

            VecD da(d, 0.0);
            for (std::size_t k = 0; k < logits.size(); ++k) {
                const double g =
                    (p[k] - (static_cast<std::size_t>(support_labels[s]) == k ? 1.0 : 0.0)) /
                    static_cast<double>(n);
                for (std::size_t i = 0; i < d; ++i) da[i] += g * tau * prototypes[k].embedding[i];
            }
            double aa = 0.0;
            for (std::size_t i = 0; i < d; ++i) aa += da[i] * f.adapted[i];
            VecD dw(d);
            for (std::size_t i = 0; i < d; ++i) dw[i] = (da[i] - aa * f.adapted[i]) / f.wnorm;

            VecD dm(d);
            for (std::size_t i = 0; i < d; ++i) dm[i] = current.residual_ratio * dw[i];
            VecD dh(r, 0.0);
            for (std::size_t i = 0; i < d; ++i) {
                double* drow = d_up.row(i);
                for (std::size_t c = 0; c < r; ++c) {
                    drow[c] += dm[i] * f.h[c];
                    dh[c] += current.up(i, c) * dm[i];
                }
            }
            for (std::size_t c = 0; c < r; ++c) {
                if (f.pre[c] <= 0.0) continue;
                double* drow = d_down.row(c);
                for (std::size_t i = 0; i < d; ++i) drow[i] += dh[c] * u[i];
            }
        }

        const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(step));
        const auto update = [&](MatD& P, const MatD& G, MatD& M, MatD& V) {
            for (std::size_t i = 0; i < P.size(); ++i) {
                const double g = G.data()[i];
                if (!std::isfinite(g)) throw NumericalError("fit_clip_adapter: non-finite gradient");
                M.data()[i] = 0.9 * M.data()[i] + 0.1 * g;
                V.data()[i] = 0.999 * V.data()[i] + 0.001 * g * g;
                P.data()[i] -= config.lr * config.weight_decay * P.data()[i] +
                               config.lr * (M.data()[i] / bc1) / (std::sqrt(V.data()[i] / bc2) + 1e-8);
            }
        };
        update(current.down, d_down, m_down, v_down);
        update(current.up, d_up, m_up, v_up);

        const auto [loss, correct] = evaluate(current);
        result.loss_trace.push_back(loss);
        // Keep the snapshot that classifies the support best (loss breaks ties),
        // so a fitted head never falls behind its zero-shot starting point.
        if (correct > best_acc || (correct == best_acc && loss < best_loss)) {
            best_acc = correct;
            best_loss = loss;
            best = current;
        }
    }

    result.head = std::move(best);
    return result;
}

}  // namespace palign
