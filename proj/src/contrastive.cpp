#include "palign/contrastive.hpp"

#include <algorithm>
#include <cmath>

namespace palign {

PositiveSets positive_sets(const std::vector<int>& labels) {
    if (labels.empty()) throw ValidationError("positive_sets: empty label list");
    const std::size_t n = labels.size();
    PositiveSets pos;
    pos.i2t.resize(n);
    pos.t2i.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (labels[i] == labels[j]) {
                pos.i2t[i].push_back(static_cast<int>(j));
                pos.t2i[i].push_back(static_cast<int>(j));
            }
    return pos;
}

namespace {

// Shared core of the two directional losses: rows index the softmax axis.
// For i2t, sims rows are images; for t2i we walk the transposed view.
double directional_loss(const MatD& sims, double log_tau, const std::vector<std::vector<int>>& pos,
                        bool over_rows) {
    const std::size_t n_outer = over_rows ? sims.rows() : sims.cols();
    const std::size_t n_inner = over_rows ? sims.cols() : sims.rows();
    if (pos.size() != n_outer)
        throw ValidationError("positive sets do not match the similarity matrix shape");
    const double tau = std::exp(log_tau);
    double loss = 0.0;
    for (std::size_t a = 0; a < n_outer; ++a) {
        if (pos[a].empty())
            throw ValidationError("empty positive set for index " + std::to_string(a));
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t b = 0; b < n_inner; ++b)
            mx = std::max(mx, tau * (over_rows ? sims(a, b) : sims(b, a)));
        double sum = 0.0;
        for (std::size_t b = 0; b < n_inner; ++b)
            sum += std::exp(tau * (over_rows ? sims(a, b) : sims(b, a)) - mx);
        const double lse = mx + std::log(sum);
        double acc = 0.0;
        for (int b : pos[a]) {
            if (b < 0 || static_cast<std::size_t>(b) >= n_inner)
                throw ValidationError("positive index out of range: " + std::to_string(b));
            acc += tau * (over_rows ? sims(a, static_cast<std::size_t>(b))
                                    : sims(static_cast<std::size_t>(b), a)) -
                   lse;
        }
        loss -= acc / static_cast<double>(pos[a].size());
    }
    return loss;
}

}  // namespace

double loss_i2t(const MatD& sims, double log_tau, const PositiveSets& pos) {
    return directional_loss(sims, log_tau, pos.i2t, true);
}

double loss_t2i(const MatD& sims, double log_tau, const PositiveSets& pos) {
    return directional_loss(sims, log_tau, pos.t2i, false);
}

LossGradients total_loss_and_grads(const ModelState& model, const MatD& image_features,
                                   const MatD& text_features, const std::vector<int>& labels) {
    const auto ev = detail::eval_batch<double>(model.vision_head, model.text_head, image_features,
                                               text_features, labels, model.log_tau);
    LossGradients out;
    out.d_vision_weights = ev.d_vision_weights;
    out.d_vision_bias = ev.d_vision_bias;
    out.d_text_weights = ev.d_text_weights;
    out.d_text_bias = ev.d_text_bias;
    out.d_log_tau = ev.d_log_tau;
    out.loss_value = ev.loss;
    return out;
}

}  // namespace palign
