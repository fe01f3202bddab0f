#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <map>

#include "palign/prompt_bank.hpp"
#include "test_util.hpp"

using namespace palign;

namespace {

Category cat(const std::string& name) { return Category{0, name, name}; }

const char* kShippedBank = PALIGN_DATA_DIR "/prompt_bank.json";
const char* kShippedRegistry = PALIGN_DATA_DIR "/category_registry.json";

}  // namespace

TEST_CASE("shipped bank: verbatim content spot checks") {
    const PromptBank bank = PromptBank::load(kShippedBank);
    CHECK(bank.naive_template() == "A fundus photograph of [CLS]");

    CHECK(bank.ek_prompts(cat("microaneurysms")) == std::vector<std::string>{"small red dots"});
    CHECK(bank.ek_prompts(cat("no diabetic retinopathy")) ==
          std::vector<std::string>{"no relevant haemorrhages, microaneurysms or exudates",
                                   "no microaneurysms", "no referable lesions"});
    CHECK(bank.ek_prompts(cat("proliferative diabetic retinopathy")) ==
          std::vector<std::string>{"diabetic retinopathy with neovascularization at the disk",
                                   "neovascularization"});
    CHECK_THROWS_AS(bank.ek_prompts(cat("zebra")), ValidationError);
}

TEST_CASE("shipped registry loads with dense unique ids") {
    const CategoryRegistry reg = CategoryRegistry::load(kShippedRegistry);
    CHECK(reg.size() > 90);
    for (std::size_t i = 0; i < reg.size(); ++i)
        CHECK(reg.categories()[i].id == static_cast<int>(i));
    const Category* mild = reg.find_abbreviation("mildDR");
    REQUIRE(mild != nullptr);
    CHECK(mild->name == "mild diabetic retinopathy");
    CHECK(reg.resolve("glaucoma") == reg.find_abbreviation("G"));
    CHECK(reg.resolve("nonexistent") == nullptr);
}

TEST_CASE("every registry category used in EK inference has prompts for its name") {
    // Not all 90+ categories carry descriptions, but the ones the bank lists
    // must resolve by registry name (plural-variant aliases included).
    const PromptBank bank = PromptBank::load(kShippedBank);
    const CategoryRegistry reg = CategoryRegistry::load(kShippedRegistry);
    for (const char* abbrev : {"hEX", "sEX", "EX", "DN", "Dis", "CAT", "N", "MA"}) {
        const Category* c = reg.find_abbreviation(abbrev);
        REQUIRE(c != nullptr);
        CHECK(!bank.ek_prompts(*c).empty());
    }
}

TEST_CASE("naive_prompt substitutes the category name") {
    PromptBank bank;
    CHECK(bank.naive_prompt(cat("glaucoma")) == "A fundus photograph of glaucoma");
    CHECK(bank.naive_prompt(cat("")) == "A fundus photograph of ");
    CHECK(bank.naive_prompt(cat("no diabetic retinopathy")) ==
          "A fundus photograph of no diabetic retinopathy");
}

TEST_CASE("naive_prompt output contains the name and no [CLS] token") {
    PromptBank bank;
    for (const char* name : {"cataract", "drusen", "x y z"}) {
        const std::string p = bank.naive_prompt(cat(name));
        CHECK(p.find(name) != std::string::npos);
        CHECK(p.find("[CLS]") == std::string::npos);
    }
}

TEST_CASE("parse: defaults, empty maps, and validation errors") {
    SUBCASE("naive_template defaults when absent") {
        const PromptBank bank = PromptBank::parse(R"({"categories": {}})");
        CHECK(bank.naive_template() == "A fundus photograph of [CLS]");
        CHECK(bank.category_count() == 0);
    }
    SUBCASE("empty categories map is a valid bank") {
        const PromptBank bank = PromptBank::parse(R"({})");
        CHECK(bank.category_count() == 0);
    }
    SUBCASE("duplicate category key is a validation error") {
        const std::string text =
            R"({"categories": {"glaucoma": ["a"], "glaucoma": ["b"]}})";
        CHECK_THROWS_AS(PromptBank::parse(text), ValidationError);
    }
    SUBCASE("malformed JSON is a format error") {
        CHECK_THROWS_AS(PromptBank::parse("{\"categories\": ["), FormatError);
    }
    SUBCASE("template must contain exactly one [CLS]") {
        CHECK_THROWS_AS(PromptBank::parse(R"({"naive_template": "no token"})"), ValidationError);
        CHECK_THROWS_AS(PromptBank::parse(R"({"naive_template": "[CLS] and [CLS]"})"),
                        ValidationError);
        CHECK_THROWS_AS(PromptBank("no token here"), ValidationError);
        CHECK_NOTHROW(PromptBank("an image of [CLS]"));
    }
    SUBCASE("empty description strings are rejected") {
        CHECK_THROWS_AS(PromptBank::parse(R"({"categories": {"g": [""]}})"), ValidationError);
    }
}

TEST_CASE("round trip: loaded strings are byte-identical to the file content") {
    const std::string text = R"({
        "naive_template": "A fundus photograph of [CLS]",
        "categories": {"weird": ["  spaces  kept ", "UPPER case KEPT", "tab\tkept"]}
    })";
    const PromptBank bank = PromptBank::parse(text);
    const auto& got = bank.ek_prompts(cat("weird"));
    CHECK(got[0] == "  spaces  kept ");
    CHECK(got[1] == "UPPER case KEPT");
    CHECK(got[2] == "tab\tkept");
}

TEST_CASE("sample_training_prompt") {
    PromptBank bank;
    bank.add_category("three", {"d1", "d2", "d3"});

    SUBCASE("no EK prompts means always the naive prompt") {
        bank.add_category("lonely", {});
        Rng rng(1);
        for (int i = 0; i < 20; ++i)
            CHECK(bank.sample_training_prompt(cat("lonely"), rng) ==
                  "A fundus photograph of lonely");
    }
    SUBCASE("same seed gives an identical draw sequence") {
        Rng a(99), b(99);
        for (int i = 0; i < 50; ++i)
            CHECK(bank.sample_training_prompt(cat("three"), a) ==
                  bank.sample_training_prompt(cat("three"), b));
    }
    SUBCASE("draws are uniform over the naive + EK set") {
        // 40000 draws over 4 prompts: each frequency within 5 sigma of 1/4.
        Rng rng(7);
        std::map<std::string, int> counts;
        const int n = 40000;
        for (int i = 0; i < n; ++i) ++counts[bank.sample_training_prompt(cat("three"), rng)];
        CHECK(counts.size() == 4);
        const double p = 0.25;
        const double sigma = std::sqrt(p * (1 - p) * n);
        for (const auto& [prompt, count] : counts)
            CHECK(std::fabs(count - p * n) < 5.0 * sigma);
        CHECK(counts.count("A fundus photograph of three") == 1);
    }
}
