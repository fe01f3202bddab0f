#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "palign/embedding.hpp"
#include "palign/errors.hpp"
#include "palign/linalg.hpp"

namespace palign {

/// Positive index sets of a batch: i2t[i] holds the text indices sharing
/// image i's label, t2i[j] the image indices sharing text j's label. For
/// paired batches both follow from the shared label list.
struct PositiveSets {
    std::vector<std::vector<int>> i2t;
    std::vector<std::vector<int>> t2i;
};

PositiveSets positive_sets(const std::vector<int>& labels);

/// Image-to-text objective: for each image, the mean negative log softmax mass
/// (rows, temperature-scaled) assigned to its same-category texts.
double loss_i2t(const MatD& sims, double log_tau, const PositiveSets& pos);

/// Text-to-image mirror of loss_i2t: softmax over columns, positives over images.
double loss_t2i(const MatD& sims, double log_tau, const PositiveSets& pos);

/// Loss value plus exact analytic gradients for one paired batch.
struct LossGradients {
    MatD d_vision_weights;
    VecD d_vision_bias;
    MatD d_text_weights;
    VecD d_text_bias;
    double d_log_tau = 0.0;
    double loss_value = 0.0;
};

/// Full bidirectional objective for a paired batch of raw features, evaluated
/// through the projection heads, with hand-derived gradients for every
/// trainable parameter (chain rule through normalization, cosine similarity,
/// temperature scaling and both softmax directions).
///
/// image_features / text_features: one row per sample; labels aligned to rows.
LossGradients total_loss_and_grads(const ModelState& model, const MatD& image_features,
                                   const MatD& text_features, const std::vector<int>& labels);

namespace detail {

template <typename T>
struct BatchEval {
    Mat<T> d_vision_weights;
    std::vector<T> d_vision_bias;
    Mat<T> d_text_weights;
    std::vector<T> d_text_bias;
    T d_log_tau = T(0);
    T loss = T(0);
};

/// The templated kernel behind total_loss_and_grads. Instantiated for double
/// (reference semantics, tests, gradcheck) and float (training throughput).
template <typename T>
BatchEval<T> eval_batch(const ProjectionHeadT<T>& vision, const ProjectionHeadT<T>& text,
                        const Mat<T>& X, const Mat<T>& Txt, const std::vector<int>& labels,
                        T log_tau) {
    const std::size_t n = X.rows();
    if (n == 0) throw ValidationError("empty batch");
    if (Txt.rows() != n || labels.size() != n)
        throw ValidationError("batch image/text/label counts differ");

    const std::size_t d = vision.out_dim();
    if (text.out_dim() != d) throw ValidationError("head output dims differ");

    // Forward: project and normalize both modalities, keeping pre-norm norms.
    Mat<T> U(n, d), V(n, d);
    std::vector<T> nu(n), nv(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<T> p(d);
        for (std::size_t r = 0; r < d; ++r) {
            T acc = vision.bias[r];
            const T* w = vision.weights.row(r);
            const T* x = X.row(i);
            for (std::size_t c = 0; c < vision.in_dim(); ++c) acc += w[c] * x[c];
            p[r] = acc;
        }
        nu[i] = norm2(p);
        if (!(nu[i] > T(0)) || !std::isfinite(static_cast<double>(nu[i])))
            throw NumericalError("degenerate vision projection for sample " + std::to_string(i));
        for (std::size_t r = 0; r < d; ++r) U(i, r) = p[r] / nu[i];
    }
    for (std::size_t j = 0; j < n; ++j) {
        std::vector<T> q(d);
        for (std::size_t r = 0; r < d; ++r) {
            T acc = text.bias[r];
            const T* w = text.weights.row(r);
            const T* t = Txt.row(j);
            for (std::size_t c = 0; c < text.in_dim(); ++c) acc += w[c] * t[c];
            q[r] = acc;
        }
        nv[j] = norm2(q);
        if (!(nv[j] > T(0)) || !std::isfinite(static_cast<double>(nv[j])))
            throw NumericalError("degenerate text projection for sample " + std::to_string(j));
        for (std::size_t r = 0; r < d; ++r) V(j, r) = q[r] / nv[j];
    }

    const T tau = std::exp(log_tau);
    Mat<T> S(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            T s = T(0);
            for (std::size_t r = 0; r < d; ++r) s += U(i, r) * V(j, r);
            S(i, j) = s;
        }

    // Positive-set weights: row-normalized and column-normalized indicators.
    std::vector<int> same_count(n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (labels[i] == labels[j]) ++same_count[i];

    // Log-softmax over rows and columns with log-sum-exp stabilization.
    Mat<T> A(n, n), B(n, n);
    T loss_row = T(0), loss_col = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        T mx = tau * S(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, tau * S(i, j));
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(tau * S(i, j) - mx);
        const T lse = mx + std::log(sum);
        for (std::size_t j = 0; j < n; ++j) {
            A(i, j) = std::exp(tau * S(i, j) - lse);
            if (labels[i] == labels[j]) loss_row -= (tau * S(i, j) - lse) / T(same_count[i]);
        }
    }
    for (std::size_t j = 0; j < n; ++j) {
        T mx = tau * S(0, j);
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, tau * S(i, j));
        T sum = T(0);
        for (std::size_t i = 0; i < n; ++i) sum += std::exp(tau * S(i, j) - mx);
        const T lse = mx + std::log(sum);
        for (std::size_t i = 0; i < n; ++i) {
            B(i, j) = std::exp(tau * S(i, j) - lse);
            if (labels[i] == labels[j]) loss_col -= (tau * S(i, j) - lse) / T(same_count[j]);
        }
    }

    // d loss / d (tau * S): softmax minus the positive-weight matrices.
    Mat<T> G(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            T g = A(i, j) + B(i, j);
            if (labels[i] == labels[j])
                g -= T(1) / T(same_count[i]) + T(1) / T(same_count[j]);
            G(i, j) = g;
        }

    BatchEval<T> out;
    out.loss = loss_row + loss_col;
    out.d_vision_weights = Mat<T>(d, vision.in_dim());
    out.d_vision_bias.assign(d, T(0));
    out.d_text_weights = Mat<T>(d, text.in_dim());
    out.d_text_bias.assign(d, T(0));

    T dtau_sum = T(0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) dtau_sum += G(i, j) * S(i, j);
    out.d_log_tau = tau * dtau_sum;  // chain through tau = exp(log_tau)

    // dU = tau * G V, dV = tau * G^T U; then back through the normalization
    // (dP = (dU - (u·dU) u) / ||p||) and the affine map.
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<T> du(d, T(0));
        for (std::size_t j = 0; j < n; ++j) {
            const T g = tau * G(i, j);
            for (std::size_t r = 0; r < d; ++r) du[r] += g * V(j, r);
        }
        T uu = T(0);
        for (std::size_t r = 0; r < d; ++r) uu += du[r] * U(i, r);
        for (std::size_t r = 0; r < d; ++r) {
            const T dp = (du[r] - uu * U(i, r)) / nu[i];
            out.d_vision_bias[r] += dp;
            T* grow = out.d_vision_weights.row(r);
            const T* x = X.row(i);
            for (std::size_t c = 0; c < vision.in_dim(); ++c) grow[c] += dp * x[c];
        }
    }
    for (std::size_t j = 0; j < n; ++j) {
        std::vector<T> dv(d, T(0));
        for (std::size_t i = 0; i < n; ++i) {
            const T g = tau * G(i, j);
            for (std::size_t r = 0; r < d; ++r) dv[r] += g * U(i, r);
        }
        T vv = T(0);
        for (std::size_t r = 0; r < d; ++r) vv += dv[r] * V(j, r);
        for (std::size_t r = 0; r < d; ++r) {
            const T dq = (dv[r] - vv * V(j, r)) / nv[j];
            out.d_text_bias[r] += dq;
            T* grow = out.d_text_weights.row(r);
            const T* t = Txt.row(j);
            for (std::size_t c = 0; c < text.in_dim(); ++c) grow[c] += dq * t[c];
        }
    }
    return out;
}

}  // namespace detail

}  // namespace palign
