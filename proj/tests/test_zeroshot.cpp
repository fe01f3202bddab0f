#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "palign/evalkit.hpp"
#include "palign/text_featurizer.hpp"
#include "palign/zeroshot.hpp"
#include "test_util.hpp"

using namespace palign;
using testutil::random_model;
using testutil::random_unit;

namespace {

TextFeaturizer make_featurizer(std::size_t dim, std::uint64_t seed = 2024) {
    return [dim, seed](const std::string& t) { return surrogate_text_features(t, dim, seed); };
}

Category cat(int id, const std::string& name) { return Category{id, name, name}; }

/// Identity text head over dim d: prompts map straight through (useful when a
/// test wants to choose prototype geometry directly).
ModelState identity_model(std::size_t d, double log_tau = 0.0) {
    ModelState m;
    m.vision_head.weights = MatD(d, d);
    m.text_head.weights = MatD(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        m.vision_head.weights(i, i) = 1.0;
        m.text_head.weights(i, i) = 1.0;
    }
    m.vision_head.bias.assign(d, 0.0);
    m.text_head.bias.assign(d, 0.0);
    m.log_tau = log_tau;
    return m;
}

}  // namespace

TEST_CASE("class_prototypes: modes, duplicates, and the centroid oracle") {
    Rng rng(1);
    const ModelState model = random_model(6, 5, 16, rng);
    const auto feat = make_featurizer(16);
    PromptBank bank;
    bank.add_category("cataract", {"opacities in the macular area"});
    bank.add_category("dup", {"same words here", "same words here"});
    bank.add_category("three", {"alpha beta", "gamma delta", "epsilon zeta"});

    SUBCASE("naive mode embeds the single templated prompt") {
        const auto protos =
            class_prototypes(bank, feat, model, {cat(0, "cataract")}, PromptMode::naive);
        REQUIRE(protos.size() == 1);
        CHECK(protos[0].prompt_count == 1);
        const VecD direct = project_normalize(
            model.text_head, feat("A fundus photograph of cataract"));
        for (std::size_t i = 0; i < direct.size(); ++i)
            CHECK(protos[0].embedding[i] == doctest::Approx(direct[i]).epsilon(1e-12));
    }

    SUBCASE("duplicate prompts collapse to the single-prompt embedding") {
        const auto protos = class_prototypes(bank, feat, model, {cat(0, "dup")}, PromptMode::ek);
        const VecD single = project_normalize(model.text_head, feat("same words here"));
        for (std::size_t i = 0; i < single.size(); ++i)
            CHECK(protos[0].embedding[i] == doctest::Approx(single[i]).epsilon(1e-12));
    }

    SUBCASE("ek centroid matches normalize(mean(normalized embeddings))") {
        const auto protos = class_prototypes(bank, feat, model, {cat(0, "three")}, PromptMode::ek);
        REQUIRE(protos[0].prompt_count == 3);
        std::vector<VecD> embs;
        for (const auto& p : {"alpha beta", "gamma delta", "epsilon zeta"})
            embs.push_back(project_normalize(model.text_head, feat(p)));
        VecD mean(embs[0].size(), 0.0);
        for (const auto& e : embs)
            for (std::size_t i = 0; i < e.size(); ++i) mean[i] += e[i] / 3.0;
        const double n = norm2(mean);
        for (std::size_t i = 0; i < mean.size(); ++i)
            CHECK(protos[0].embedding[i] == doctest::Approx(mean[i] / n).epsilon(1e-12));
        CHECK(norm2(protos[0].embedding) == doctest::Approx(1.0).epsilon(1e-6));
    }

    SUBCASE("prototype is invariant to prompt order") {
        PromptBank bank2;
        bank2.add_category("three", {"gamma delta", "epsilon zeta", "alpha beta"});
        const auto a = class_prototypes(bank, feat, model, {cat(0, "three")}, PromptMode::ek);
        const auto b = class_prototypes(bank2, feat, model, {cat(0, "three")}, PromptMode::ek);
        for (std::size_t i = 0; i < a[0].embedding.size(); ++i)
            CHECK(a[0].embedding[i] == doctest::Approx(b[0].embedding[i]).epsilon(1e-12));
    }

    SUBCASE("anomaly mode ignores categories and uses normal/disease") {
        const auto protos =
            class_prototypes(bank, feat, model, {cat(0, "whatever")}, PromptMode::anomaly);
        REQUIRE(protos.size() == 2);
        CHECK(protos[0].category.name == "normal");
        CHECK(protos[1].category.name == "disease");
        const VecD normal = project_normalize(model.text_head, feat("normal"));
        for (std::size_t i = 0; i < normal.size(); ++i)
            CHECK(protos[0].embedding[i] == doctest::Approx(normal[i]).epsilon(1e-12));
    }

    SUBCASE("ek mode requires P >= 1") {
        PromptBank empty;
        empty.add_category("bare", {});
        CHECK_THROWS_AS(class_prototypes(empty, feat, model, {cat(0, "bare")}, PromptMode::ek),
                        ValidationError);
        CHECK_THROWS_AS(class_prototypes(empty, feat, model, {cat(0, "missing")}, PromptMode::ek),
                        ValidationError);
    }
}

TEST_CASE("predict: closed-form cases") {
    const std::size_t d = 4;
    const ModelState model = identity_model(d, std::log(10.0));

    std::vector<ClassPrototype> protos(2);
    protos[0].category = cat(0, "a");
    protos[0].embedding = VecD{1, 0, 0, 0};
    protos[0].prompt_count = 1;
    protos[1].category = cat(1, "b");
    protos[1].embedding = VecD{0, 1, 0, 0};
    protos[1].prompt_count = 1;

    SUBCASE("single prototype gets probability one") {
        const auto pred = predict(model, VecD{0.3, 0.2, 0.1, 0.0},
                                  {protos[0]});
        CHECK(pred.class_id == 0);
        CHECK(pred.probabilities[0] == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("aligned vs orthogonal prototype, tau=10") {
        const auto pred = predict(model, VecD{2.0, 0, 0, 0}, protos);
        CHECK(pred.class_id == 0);
        const double expect = std::exp(10.0) / (std::exp(10.0) + 1.0);
        CHECK(pred.probabilities[0] == doctest::Approx(expect).epsilon(1e-9));
    }

    SUBCASE("argmax is invariant to tau; probabilities are not") {
        Rng rng(55);
        for (int trial = 0; trial < 50; ++trial) {
            const VecD img = random_unit(d, rng);
            std::vector<ClassPrototype> ps(3);
            for (int c = 0; c < 3; ++c) {
                ps[c].category = cat(c, "c" + std::to_string(c));
                ps[c].embedding = random_unit(d, rng);
                ps[c].prompt_count = 1;
            }
            ModelState m1 = identity_model(d, 0.0);
            ModelState m50 = identity_model(d, std::log(50.0));
            const auto p1 = predict(m1, img, ps);
            const auto p50 = predict(m50, img, ps);
            CHECK(p1.class_id == p50.class_id);
        }
    }

    SUBCASE("ties break to the lowest class index") {
        std::vector<ClassPrototype> same = {protos[0], protos[0]};
        same[1].category = cat(1, "b");
        const auto pred = predict(model, VecD{1.0, 0, 0, 0}, same);
        CHECK(pred.class_id == 0);
    }

    SUBCASE("probabilities sum to one and lie in (0,1)") {
        Rng rng(66);
        for (int trial = 0; trial < 30; ++trial) {
            std::vector<ClassPrototype> ps(4);
            for (int c = 0; c < 4; ++c) {
                ps[c].category = cat(c, "c");
                ps[c].embedding = random_unit(d, rng);
            }
            const auto pred = predict(model, random_unit(d, rng), ps);
            double sum = 0.0;
            for (double p : pred.probabilities) {
                CHECK(p > 0.0);
                CHECK(p < 1.0);
                sum += p;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
}

TEST_CASE("ek ensemble beats a single random prompt on noisy prompt classes") {
    // Class text features = prototype direction + per-prompt noise. The
    // centroid averages the noise away, a lone prompt does not.
    int ek_wins = 0;
    const std::size_t d = 12, n_classes = 4, n_test = 60, n_prompts = 3;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed * 7 + 1);
        const ModelState model = identity_model(d, std::log(10.0));
        std::vector<VecD> class_dirs;
        for (std::size_t c = 0; c < n_classes; ++c) class_dirs.push_back(random_unit(d, rng));

        std::vector<ClassPrototype> ek(n_classes), single(n_classes);
        for (std::size_t c = 0; c < n_classes; ++c) {
            std::vector<VecD> prompts;
            for (std::size_t p = 0; p < n_prompts; ++p) {
                VecD v = class_dirs[c];
                for (auto& x : v) x += 0.8 * rng.normal();
                const double n = norm2(v);
                for (auto& x : v) x /= n;
                prompts.push_back(v);
            }
            ek[c].category = cat(static_cast<int>(c), "c");
            ek[c].embedding = normalized_mean(prompts);
            ek[c].prompt_count = n_prompts;
            single[c].category = ek[c].category;
            single[c].embedding = prompts[rng.uniform_int(n_prompts)];
            single[c].prompt_count = 1;
        }

        std::size_t correct_ek = 0, correct_single = 0;
        for (std::size_t t = 0; t < n_test; ++t) {
            const std::size_t c = rng.uniform_int(n_classes);
            VecD img = class_dirs[c];
            for (auto& x : img) x += 0.4 * rng.normal();
            if (predict(model, img, ek).class_id == static_cast<int>(c)) ++correct_ek;
            if (predict(model, img, single).class_id == static_cast<int>(c)) ++correct_single;
        }
        if (correct_ek >= correct_single) ++ek_wins;
    }
    CHECK(ek_wins >= 16);  // >= 80% of the 20 trials
}

TEST_CASE("prompt mode parsing") {
    CHECK(parse_prompt_mode("naive") == PromptMode::naive);
    CHECK(parse_prompt_mode("ek") == PromptMode::ek);
    CHECK(parse_prompt_mode("anomaly") == PromptMode::anomaly);
    CHECK_THROWS_AS(parse_prompt_mode("bogus"), ConfigError);
}
