#include "palign/embedding.hpp"

#include <algorithm>

namespace palign {

void ModelState::validate() const {
    if (!all_finite(vision_head.weights) || !all_finite(vision_head.bias))
        throw ValidationError("vision head has non-finite parameters");
    if (!all_finite(text_head.weights) || !all_finite(text_head.bias))
        throw ValidationError("text head has non-finite parameters");
    if (!std::isfinite(log_tau)) throw ValidationError("log_tau is non-finite");
    const double t = std::exp(log_tau);
    if (!(t > 0.0) || t > kTauMax)
        throw ValidationError("tau out of range (0, 1000]: " + std::to_string(t));
    if (vision_head.out_dim() != text_head.out_dim())
        throw ValidationError("projection heads disagree on the joint dimension");
    if (vision_head.bias.size() != vision_head.out_dim() ||
        text_head.bias.size() != text_head.out_dim())
        throw ValidationError("bias length does not match head output dim");
}

ProjectionHead init_head(std::size_t out_dim, std::size_t in_dim, Rng& rng) {
    ProjectionHead head;
    head.weights = MatD(out_dim, in_dim);
    head.bias.assign(out_dim, 0.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (auto& w : head.weights.data()) w = rng.uniform(-bound, bound);
    return head;
}

ModelState init_model(std::size_t joint_dim, std::size_t vision_dim, std::size_t text_dim,
                      std::uint64_t seed) {
    if (joint_dim == 0 || vision_dim == 0 || text_dim == 0)
        throw ConfigError("model dimensions must be positive");
    Rng rng = make_stream_rng(seed, 0xA11CE);
    ModelState m;
    m.vision_head = init_head(joint_dim, vision_dim, rng);
    m.text_head = init_head(joint_dim, text_dim, rng);
    m.log_tau = kDefaultLogTau;
    return m;
}

MatD similarity_matrix(const std::vector<VecD>& U, const std::vector<VecD>& V) {
    const std::size_t dim = U.empty() ? (V.empty() ? 0 : V[0].size()) : U[0].size();
    for (const auto& u : U)
        if (u.size() != dim) throw ValidationError("similarity_matrix: ragged embedding dims");
    for (const auto& v : V)
        if (v.size() != dim) throw ValidationError("similarity_matrix: embedding dim mismatch");
    MatD out(U.size(), V.size());
    for (std::size_t i = 0; i < U.size(); ++i)
        for (std::size_t j = 0; j < V.size(); ++j) out(i, j) = dot(U[i], V[j]);
    return out;
}

MatD scaled_logits(const MatD& sims, double log_tau) {
    const double tau = std::exp(log_tau);
    MatD out = sims;
    for (auto& x : out.data()) x *= tau;
    return out;
}

VecD normalized_mean(const std::vector<VecD>& unit_vectors) {
    if (unit_vectors.empty()) throw ValidationError("normalized_mean: empty input");
    VecD mean(unit_vectors[0].size(), 0.0);
    for (const auto& v : unit_vectors) {
        if (v.size() != mean.size()) throw ValidationError("normalized_mean: dim mismatch");
        for (std::size_t i = 0; i < v.size(); ++i) mean[i] += v[i];
    }
    for (auto& x : mean) x /= static_cast<double>(unit_vectors.size());
    const double n = norm2(mean);
    if (!(n > 1e-12))
        throw NumericalError("normalized_mean: centroid has (numerically) zero norm");
    for (auto& x : mean) x /= n;
    return mean;
}

VecD softmax(const VecD& logits) {
    if (logits.empty()) throw ValidationError("softmax: empty input");
    const double mx = *std::max_element(logits.begin(), logits.end());
    VecD out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (auto& x : out) x /= sum;
    return out;
}

}  // namespace palign
