#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "palign/errors.hpp"
#include "palign/linalg.hpp"
#include "palign/rng.hpp"

namespace palign {

/// Affine map into the joint embedding space. weights is D_out x D_in.
template <typename T>
struct ProjectionHeadT {
    Mat<T> weights;
    std::vector<T> bias;

    std::size_t in_dim() const { return weights.cols(); }
    std::size_t out_dim() const { return weights.rows(); }

    template <typename U>
    ProjectionHeadT<U> cast() const {
        return ProjectionHeadT<U>{weights.template cast<U>(), cast_vec<U>(
            std::vector<double>(bias.begin(), bias.end()))};
    }
};

using ProjectionHead = ProjectionHeadT<double>;

inline constexpr double kTauMax = 1000.0;
inline constexpr double kTauMin = 1e-8;  // keeps exp(log_tau) strictly positive
inline const double kLogTauMax = std::log(kTauMax);
inline const double kLogTauMin = std::log(kTauMin);
inline const double kDefaultLogTau = std::log(1.0 / 0.07);

inline double clamp_log_tau(double log_tau) {
    if (log_tau > kLogTauMax) return kLogTauMax;
    if (log_tau < kLogTauMin) return kLogTauMin;
    return log_tau;
}

/// Trainable state: both projection heads plus the log-parameterized
/// temperature. Treated as an immutable snapshot everywhere except the trainer.
struct ModelState {
    ProjectionHead vision_head;
    ProjectionHead text_head;
    double log_tau = kDefaultLogTau;

    double tau() const { return std::exp(log_tau); }
    std::size_t joint_dim() const { return vision_head.out_dim(); }
    std::size_t vision_dim() const { return vision_head.in_dim(); }
    std::size_t text_dim() const { return text_head.in_dim(); }

    // Surrogate featurizer identity carried alongside the weights so inference
    // reconstructs the exact text features used in training.
    std::uint64_t featurizer_seed = 0;

    void validate() const;
};

/// Heads with weights uniform in [-1/sqrt(D_in), +1/sqrt(D_in)], zero bias.
ProjectionHead init_head(std::size_t out_dim, std::size_t in_dim, Rng& rng);
ModelState init_model(std::size_t joint_dim, std::size_t vision_dim, std::size_t text_dim,
                      std::uint64_t seed);

/// Affine projection followed by L2 normalization onto the unit hypersphere.
/// Throws NumericalError when the pre-normalization vector has zero norm.
template <typename T>
std::vector<T> project_normalize_t(const ProjectionHeadT<T>& head, const std::vector<T>& feature,
                                   const std::string& what = "input") {
    if (feature.size() != head.in_dim())
        throw ValidationError("projection input length " + std::to_string(feature.size()) +
                              " does not match head input dim " + std::to_string(head.in_dim()));
    std::vector<T> p(head.out_dim());
    for (std::size_t r = 0; r < head.out_dim(); ++r) {
        T acc = head.bias[r];
        const T* w = head.weights.row(r);
        for (std::size_t c = 0; c < head.in_dim(); ++c) acc += w[c] * feature[c];
        p[r] = acc;
    }
    const T n = norm2(p);
    if (!(n > T(0)) || !std::isfinite(static_cast<double>(n)))
        throw NumericalError("degenerate projection (zero or non-finite norm) for " + what);
    for (auto& x : p) x /= n;
    return p;
}

inline VecD project_normalize(const ProjectionHead& head, const VecD& feature,
                              const std::string& what = "input") {
    return project_normalize_t<double>(head, feature, what);
}

/// Pairwise cosine similarities of unit vectors: entry (i,j) = U[i]·V[j].
MatD similarity_matrix(const std::vector<VecD>& U, const std::vector<VecD>& V);

/// Entrywise exp(log_tau) * sims.
MatD scaled_logits(const MatD& sims, double log_tau);

/// Renormalized mean of unit vectors. Throws NumericalError when the mean is
/// (numerically) the zero vector.
VecD normalized_mean(const std::vector<VecD>& unit_vectors);

/// Numerically stable softmax of a logit vector.
VecD softmax(const VecD& logits);

}  // namespace palign
