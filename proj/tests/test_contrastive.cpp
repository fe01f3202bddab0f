#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "palign/contrastive.hpp"
#include "test_util.hpp"

using namespace palign;
using testutil::random_labels;
using testutil::random_matrix;
using testutil::random_model;

TEST_CASE("positive_sets enumerates same-label indices") {
    SUBCASE("all distinct") {
        const auto pos = positive_sets({0, 1, 2});
        CHECK(pos.i2t == std::vector<std::vector<int>>{{0}, {1}, {2}});
        CHECK(pos.t2i == std::vector<std::vector<int>>{{0}, {1}, {2}});
    }
    SUBCASE("all same") {
        const auto pos = positive_sets({5, 5, 5});
        for (int i = 0; i < 3; ++i) CHECK(pos.i2t[i] == std::vector<int>{0, 1, 2});
    }
    SUBCASE("mixed, against pairwise-equality enumeration") {
        const std::vector<int> labels{0, 1, 0, 2, 1};
        const auto pos = positive_sets(labels);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            std::vector<int> expect;
            for (std::size_t j = 0; j < labels.size(); ++j)
                if (labels[j] == labels[i]) expect.push_back(static_cast<int>(j));
            CHECK(pos.i2t[i] == expect);
        }
        CHECK(pos.i2t[0] == std::vector<int>{0, 2});
        CHECK(pos.i2t[1] == std::vector<int>{1, 4});
        CHECK(pos.i2t[3] == std::vector<int>{3});
    }
    SUBCASE("own pair always positive") {
        Rng rng(7);
        for (int trial = 0; trial < 20; ++trial) {
            const auto labels = random_labels(1 + rng.uniform_int(8), 3, rng);
            const auto pos = positive_sets(labels);
            for (std::size_t i = 0; i < labels.size(); ++i) {
                bool found = false;
                for (int j : pos.i2t[i])
                    if (j == static_cast<int>(i)) found = true;
                CHECK(found);
            }
        }
    }
    SUBCASE("empty labels rejected") {
        CHECK_THROWS_AS(positive_sets({}), ValidationError);
    }
}

TEST_CASE("directional losses: trivial and hand-computed values") {
    SUBCASE("singleton batch is exactly zero") {
        MatD sims(1, 1);
        sims(0, 0) = 0.73;
        const auto pos = positive_sets({4});
        CHECK(loss_i2t(sims, 0.0, pos) == doctest::Approx(0.0).epsilon(1e-15));
        CHECK(loss_t2i(sims, 0.0, pos) == doctest::Approx(0.0).epsilon(1e-15));
    }
    SUBCASE("two orthonormal pairs, tau=1") {
        // u1=v1=e1, u2=v2=e2 -> each row softmax gives e/(e+1) on the diagonal.
        MatD sims(2, 2);
        sims(0, 0) = 1.0;
        sims(1, 1) = 1.0;
        const auto pos = positive_sets({0, 1});
        const double expected = 2.0 * (-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)));
        CHECK(loss_i2t(sims, 0.0, pos) == doctest::Approx(expected).epsilon(1e-9));
        CHECK(loss_t2i(sims, 0.0, pos) == doctest::Approx(expected).epsilon(1e-9));
        CHECK(expected == doctest::Approx(0.626523).epsilon(1e-5));
    }
    SUBCASE("symmetric configuration makes both directions equal") {
        Rng rng(11);
        MatD sims(3, 3);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = i; j < 3; ++j) sims(i, j) = sims(j, i) = rng.uniform(-1, 1);
        const auto pos = positive_sets({0, 0, 1});
        CHECK(loss_i2t(sims, 0.4, pos) == doctest::Approx(loss_t2i(sims, 0.4, pos)).epsilon(1e-14));
    }
    SUBCASE("empty positive set is a contract violation") {
        MatD sims(2, 2);
        PositiveSets pos;
        pos.i2t = {{0}, {}};
        pos.t2i = {{0}, {1}};
        CHECK_THROWS_AS(loss_i2t(sims, 0.0, pos), ValidationError);
    }
}

TEST_CASE("losses match the literal enumeration oracle") {
    Rng rng(123);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.uniform_int(8);
        const auto labels = random_labels(n, 3, rng);
        MatD sims(n, n);
        for (auto& s : sims.data()) s = rng.uniform(-1.0, 1.0);
        const double log_tau = rng.uniform(-0.5, 1.5);
        const auto pos = positive_sets(labels);
        CHECK(loss_i2t(sims, log_tau, pos) ==
              doctest::Approx(oracles::enumerate_loss_i2t(sims, log_tau, labels)).epsilon(1e-10));
        CHECK(loss_t2i(sims, log_tau, pos) ==
              doctest::Approx(oracles::enumerate_loss_t2i(sims, log_tau, labels)).epsilon(1e-10));
    }
}

TEST_CASE("losses are nonnegative") {
    Rng rng(321);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.uniform_int(6);
        const auto labels = random_labels(n, 2, rng);
        MatD sims(n, n);
        for (auto& s : sims.data()) s = rng.uniform(-1.0, 1.0);
        const auto pos = positive_sets(labels);
        CHECK(loss_i2t(sims, rng.uniform(-1, 2), pos) >= -1e-12);
        CHECK(loss_t2i(sims, rng.uniform(-1, 2), pos) >= -1e-12);
    }
}

TEST_CASE("all-distinct labels reduce to standard symmetric InfoNCE") {
    Rng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.uniform_int(5);
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i);
        MatD sims(n, n);
        for (auto& s : sims.data()) s = rng.uniform(-1.0, 1.0);
        const double log_tau = rng.uniform(-0.5, 1.5);
        const auto pos = positive_sets(labels);
        const double ours = loss_i2t(sims, log_tau, pos) + loss_t2i(sims, log_tau, pos);
        const double standard = oracles::standard_symmetric_infonce(sims, log_tau);
        CHECK(std::fabs(ours - standard) <= 1e-12 * std::max(1.0, std::fabs(standard)));
    }
}

namespace {

struct RandomInstance {
    ModelState model;
    MatD X, T;
    std::vector<int> labels;
};

RandomInstance random_instance(Rng& rng, std::size_t max_batch = 6, std::size_t max_dim = 8) {
    RandomInstance inst;
    const std::size_t n = 1 + rng.uniform_int(max_batch);
    const std::size_t du = 1 + rng.uniform_int(max_dim);
    const std::size_t dv = 1 + rng.uniform_int(max_dim);
    const std::size_t joint = 1 + rng.uniform_int(max_dim);
    inst.model = random_model(joint, du, dv, rng, rng.uniform(-1.0, 1.5));
    inst.X = random_matrix(n, du, rng);
    inst.T = random_matrix(n, dv, rng);
    inst.labels = random_labels(n, 3, rng);
    return inst;
}

}  // namespace

TEST_CASE("total_loss_and_grads: loss recomposes from the directional losses") {
    Rng rng(2024);
    for (int trial = 0; trial < 40; ++trial) {
        const auto inst = random_instance(rng);
        const auto result = total_loss_and_grads(inst.model, inst.X, inst.T, inst.labels);

        std::vector<VecD> U, V;
        for (std::size_t i = 0; i < inst.X.rows(); ++i) {
            U.push_back(project_normalize(inst.model.vision_head, inst.X.row_copy(i)));
            V.push_back(project_normalize(inst.model.text_head, inst.T.row_copy(i)));
        }
        const MatD sims = similarity_matrix(U, V);
        const auto pos = positive_sets(inst.labels);
        const double recomposed =
            loss_i2t(sims, inst.model.log_tau, pos) + loss_t2i(sims, inst.model.log_tau, pos);
        CHECK(result.loss_value == doctest::Approx(recomposed).epsilon(1e-12));
    }
}

TEST_CASE("total_loss_and_grads: singleton symmetric batch has zero gradients") {
    Rng rng(5);
    const auto inst = random_instance(rng, 1, 5);
    const auto result = total_loss_and_grads(inst.model, inst.X, inst.T, inst.labels);
    CHECK(result.loss_value == doctest::Approx(0.0).epsilon(1e-14));
    for (double g : result.d_vision_weights.data()) CHECK(std::fabs(g) < 1e-14);
    for (double g : result.d_vision_bias) CHECK(std::fabs(g) < 1e-14);
    for (double g : result.d_text_weights.data()) CHECK(std::fabs(g) < 1e-14);
    for (double g : result.d_text_bias) CHECK(std::fabs(g) < 1e-14);
    CHECK(std::fabs(result.d_log_tau) < 1e-14);
}

TEST_CASE("analytic gradients match central finite differences") {
    Rng rng(77);
    double max_err = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto inst = random_instance(rng, 4, 5);
        const auto analytic = total_loss_and_grads(inst.model, inst.X, inst.T, inst.labels);
        const auto fd = oracles::finite_diff_grads(inst.model, inst.X, inst.T, inst.labels);

        for (std::size_t i = 0; i < analytic.d_vision_weights.size(); ++i)
            max_err = std::max(max_err, oracles::grad_rel_error(analytic.d_vision_weights.data()[i],
                                                                fd.d_vision_weights.data()[i]));
        for (std::size_t i = 0; i < analytic.d_vision_bias.size(); ++i)
            max_err = std::max(
                max_err, oracles::grad_rel_error(analytic.d_vision_bias[i], fd.d_vision_bias[i]));
        for (std::size_t i = 0; i < analytic.d_text_weights.size(); ++i)
            max_err = std::max(max_err, oracles::grad_rel_error(analytic.d_text_weights.data()[i],
                                                                fd.d_text_weights.data()[i]));
        for (std::size_t i = 0; i < analytic.d_text_bias.size(); ++i)
            max_err = std::max(max_err,
                               oracles::grad_rel_error(analytic.d_text_bias[i], fd.d_text_bias[i]));
        max_err = std::max(max_err, oracles::grad_rel_error(analytic.d_log_tau, fd.d_log_tau));
    }
    CHECK(max_err < 1e-4);
}

TEST_CASE("permutation equivariance of the batch loss") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        auto inst = random_instance(rng, 6, 5);
        const double base = total_loss_and_grads(inst.model, inst.X, inst.T, inst.labels).loss_value;

        std::vector<std::size_t> perm(inst.X.rows());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        rng.shuffle(perm);
        MatD Xp(inst.X.rows(), inst.X.cols()), Tp(inst.T.rows(), inst.T.cols());
        std::vector<int> lp(inst.labels.size());
        for (std::size_t i = 0; i < perm.size(); ++i) {
            Xp.set_row(i, inst.X.row_copy(perm[i]));
            Tp.set_row(i, inst.T.row_copy(perm[i]));
            lp[i] = inst.labels[perm[i]];
        }
        const double permuted = total_loss_and_grads(inst.model, Xp, Tp, lp).loss_value;
        CHECK(std::fabs(base - permuted) <= 1e-12 * std::max(1.0, std::fabs(base)));
    }
}

TEST_CASE("duplicating a pair keeps positive sets and loss coherent") {
    Rng rng(63);
    auto inst = random_instance(rng, 4, 4);
    const std::size_t n = inst.X.rows();

    MatD X2(n + 1, inst.X.cols()), T2(n + 1, inst.T.cols());
    std::vector<int> l2(n + 1);
    for (std::size_t i = 0; i < n; ++i) {
        X2.set_row(i, inst.X.row_copy(i));
        T2.set_row(i, inst.T.row_copy(i));
        l2[i] = inst.labels[i];
    }
    X2.set_row(n, inst.X.row_copy(0));
    T2.set_row(n, inst.T.row_copy(0));
    l2[n] = inst.labels[0];

    const auto pos = positive_sets(l2);
    bool has_orig = false, has_dup = false;
    for (int j : pos.i2t[n]) {
        if (j == 0) has_orig = true;
        if (j == static_cast<int>(n)) has_dup = true;
    }
    CHECK(has_orig);
    CHECK(has_dup);

    const double loss = total_loss_and_grads(inst.model, X2, T2, l2).loss_value;
    CHECK(std::isfinite(loss));
    CHECK(loss >= -1e-12);
}

TEST_CASE("zero-norm projection names the offending sample") {
    ModelState m;
    m.vision_head.weights = MatD(2, 2);  // all zeros
    m.vision_head.bias = {0.0, 0.0};
    Rng rng(1);
    m.text_head = random_model(2, 2, 2, rng).text_head;
    m.log_tau = 0.0;
    MatD X(1, 2), T(1, 2);
    X(0, 0) = 1.0;
    T(0, 0) = 1.0;
    try {
        total_loss_and_grads(m, X, T, {0});
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("sample 0") != std::string::npos);
    }
}

TEST_CASE("float kernel tracks the double kernel") {
    Rng rng(404);
    for (int trial = 0; trial < 10; ++trial) {
        const auto inst = random_instance(rng, 5, 6);
        const auto d64 = total_loss_and_grads(inst.model, inst.X, inst.T, inst.labels);
        const auto f32 = detail::eval_batch<float>(
            inst.model.vision_head.cast<float>(), inst.model.text_head.cast<float>(),
            inst.X.cast<float>(), inst.T.cast<float>(), inst.labels,
            static_cast<float>(inst.model.log_tau));
        CHECK(static_cast<double>(f32.loss) == doctest::Approx(d64.loss_value).epsilon(1e-4));
    }
}
