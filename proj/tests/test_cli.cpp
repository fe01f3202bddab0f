// End-to-end checks of the command-line surface: exit codes, file outputs,
// and the documented subcommand contracts. Shells out to the built binary.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <json.hpp>

using nlohmann::json;

namespace {

const std::string kCli = PALIGN_CLI_PATH;
const std::string kDir = "/tmp/palign_cli_test";

int run(const std::string& args) {
    const int rc = std::system((kCli + " " + args + " >" + kDir + "/stdout.txt 2>" + kDir +
                                "/stderr.txt")
                                   .c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json first_json_line(const std::string& path, std::size_t skip = 0) {
    std::ifstream in(path);
    std::string line;
    for (std::size_t i = 0; i <= skip; ++i) std::getline(in, line);
    return json::parse(line);
}

struct Setup {
    Setup() {
        REQUIRE(std::system(("rm -rf " + kDir + " && mkdir -p " + kDir).c_str()) == 0);
        REQUIRE(run("--seed 7 synth --classes 3 --per-class 30 --dim 8 --separation 5 "
                    "--out-dir " +
                    kDir) == 0);
        REQUIRE(run("--seed 7 pretrain --manifest " + kDir + "/manifest.jsonl --image-emb " +
                    kDir + "/images.emb --prompt-bank " + kDir + "/prompt_bank.json --registry " +
                    kDir + "/registry.json --joint-dim 16 --text-dim 24 --batch-size 16 "
                    "--epochs 12 --out " +
                    kDir + "/model.json --trace " + kDir + "/trace.jsonl") == 0);
    }
};

Setup& setup() {
    static Setup s;
    return s;
}

}  // namespace

TEST_CASE("exit codes: usage 2, data 3, numerical 4") {
    setup();
    CHECK(run("pretrain --manifest missing.jsonl") == 2);  // missing required flags
    CHECK(run("bogus-subcommand") == 2);
    CHECK(run("zeroshot --model " + kDir + "/nope.json --manifest " + kDir +
              "/manifest.jsonl --image-emb " + kDir + "/images.emb --prompt-bank " + kDir +
              "/prompt_bank.json --registry " + kDir + "/registry.json --classes S0,S1,S2 --out " +
              kDir + "/p.jsonl") == 3);
    CHECK(run("--seed 1 gradcheck --trials 5 --tolerance 0") == 4);
    // mode=ek without bank entries for the class is a data error
    CHECK(run("zeroshot --model " + kDir + "/model.json --manifest " + kDir +
              "/manifest.jsonl --image-emb " + kDir + "/images.emb --prompt-bank " + kDir +
              "/prompt_bank.json --registry " + kDir +
              "/registry.json --mode ek --classes nonexistent --out " + kDir + "/p.jsonl") == 3);
}

TEST_CASE("pretrain trace is JSONL with the documented fields") {
    setup();
    const json line = first_json_line(kDir + "/trace.jsonl");
    CHECK(line.contains("epoch"));
    CHECK(line.contains("mean_loss"));
    CHECK(line.contains("lr"));
    CHECK(line.contains("tau"));
}

TEST_CASE("zeroshot: ek/naive/anomaly produce well-formed predictions") {
    setup();
    const std::string common = "zeroshot --model " + kDir + "/model.json --manifest " + kDir +
                               "/manifest.jsonl --image-emb " + kDir + "/images.emb "
                               "--prompt-bank " +
                               kDir + "/prompt_bank.json --registry " + kDir + "/registry.json";

    SUBCASE("ek mode") {
        REQUIRE(run(common + " --mode ek --classes S0,S1,S2 --out " + kDir + "/zs.jsonl") == 0);
        const json meta = first_json_line(kDir + "/zs.jsonl");
        CHECK(meta["classes"].size() == 3);
        const json pred = first_json_line(kDir + "/zs.jsonl", 1);
        CHECK(pred.contains("id"));
        CHECK(pred.contains("class"));
        CHECK(pred["probabilities"].size() == 3);
        double sum = 0.0;
        for (double p : pred["probabilities"]) sum += p;
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }

    SUBCASE("naive mode accepts full names too") {
        REQUIRE(run(common + " --mode naive --classes \"synthetic class 0,synthetic class 1\" "
                             "--out " +
                    kDir + "/zs_naive.jsonl") == 0);
        const json meta = first_json_line(kDir + "/zs_naive.jsonl");
        CHECK(meta["classes"][0] == "synthetic class 0");
    }

    SUBCASE("anomaly mode ignores classes") {
        REQUIRE(run(common + " --mode anomaly --out " + kDir + "/zs_anom.jsonl") == 0);
        const json meta = first_json_line(kDir + "/zs_anom.jsonl");
        REQUIRE(meta["classes"].size() == 2);
        CHECK(meta["classes"][0] == "normal");
        CHECK(meta["classes"][1] == "disease");
    }

    SUBCASE("threads flag gives identical output") {
        REQUIRE(run(common + " --mode ek --classes S0,S1,S2 --out " + kDir + "/zs_t1.jsonl") == 0);
        REQUIRE(run("--threads 4 " + common + " --mode ek --classes S0,S1,S2 --out " + kDir +
                    "/zs_t4.jsonl") == 0);
        CHECK(slurp(kDir + "/zs_t1.jsonl") == slurp(kDir + "/zs_t4.jsonl"));
    }
}

TEST_CASE("eval: multiclass, ordinal, binary, anomaly-merge") {
    setup();
    const std::string common = "zeroshot --model " + kDir + "/model.json --manifest " + kDir +
                               "/manifest.jsonl --image-emb " + kDir + "/images.emb "
                               "--prompt-bank " +
                               kDir + "/prompt_bank.json --registry " + kDir + "/registry.json";
    REQUIRE(run(common + " --mode ek --classes S0,S1,S2 --out " + kDir + "/zs.jsonl") == 0);

    SUBCASE("multiclass report schema") {
        REQUIRE(run("eval --predictions " + kDir + "/zs.jsonl --labels " + kDir +
                    "/manifest.jsonl --registry " + kDir + "/registry.json --task multiclass "
                    "--out " +
                    kDir + "/report.json") == 0);
        const json rep = json::parse(slurp(kDir + "/report.json"));
        CHECK(rep.contains("aca"));
        CHECK(rep.contains("per_class"));
        CHECK(rep.contains("folds"));
        CHECK(rep.contains("mean"));
        CHECK(rep.contains("std"));
        CHECK(!rep.contains("kappa"));
        CHECK(rep["aca"].get<double>() >= 0.0);
    }

    SUBCASE("ordinal adds kappa") {
        REQUIRE(run("eval --predictions " + kDir + "/zs.jsonl --labels " + kDir +
                    "/manifest.jsonl --registry " + kDir + "/registry.json --task ordinal --out " +
                    kDir + "/report_ord.json") == 0);
        const json rep = json::parse(slurp(kDir + "/report_ord.json"));
        CHECK(rep.contains("kappa"));
    }

    SUBCASE("binary on anomaly predictions with merge reports both averages") {
        REQUIRE(run(common + " --mode anomaly --out " + kDir + "/zs_anom.jsonl") == 0);
        // For the merge, ground truth must contain the negative class: rename
        // synthetic class 0 to "normal" via an alternate registry.
        std::ofstream(kDir + "/registry_anom.json")
            << R"([{"abbreviation":"S0","name":"normal"},)"
            << R"({"abbreviation":"S1","name":"synthetic class 1"},)"
            << R"({"abbreviation":"S2","name":"synthetic class 2"}])";
        REQUIRE(run("eval --predictions " + kDir + "/zs_anom.jsonl --labels " + kDir +
                    "/manifest.jsonl --registry " + kDir + "/registry_anom.json --task binary "
                    "--positive disease --anomaly-merge --out " +
                    kDir + "/report_anom.json") == 0);
        const json rep = json::parse(slurp(kDir + "/report_anom.json"));
        CHECK(rep.contains("auc"));
        REQUIRE(rep.contains("anomaly"));
        CHECK(rep["anomaly"].contains("merged_aca"));
        CHECK(rep["anomaly"].contains("unmerged_average"));
        CHECK(rep["anomaly"]["per_original_class"].size() == 3);
    }

    SUBCASE("binary without --positive is a usage error") {
        CHECK(run("eval --predictions " + kDir + "/zs.jsonl --labels " + kDir +
                  "/manifest.jsonl --registry " + kDir + "/registry.json --task binary --out " +
                  kDir + "/r.json") == 2);
    }
}

TEST_CASE("adapt emits adapter + predictions and a fold report") {
    setup();
    const std::string common = "--seed 3 adapt --model " + kDir + "/model.json --manifest " +
                               kDir + "/manifest.jsonl --image-emb " + kDir + "/images.emb "
                               "--prompt-bank " +
                               kDir + "/prompt_bank.json --registry " + kDir +
                               "/registry.json --classes S0,S1,S2 --folds 2";

    SUBCASE("linear probe, shots regime") {
        REQUIRE(run(common + " --method lp --shots 3 --out-adapter " + kDir +
                    "/lp.json --out-predictions " + kDir + "/lp_preds.jsonl") == 0);
        const json adapter = json::parse(slurp(kDir + "/lp.json"));
        CHECK(adapter["method"] == "lp");
        CHECK(adapter["folds"].size() == 2);
        CHECK(adapter["folds"][0].contains("weights"));
        const json report = json::parse(slurp(kDir + "/stdout.txt"));
        CHECK(report["folds"].size() == 2);
        // fold predictions cover the fixed test set twice
        std::ifstream in(kDir + "/lp_preds.jsonl");
        std::string line;
        std::size_t lines = 0;
        while (std::getline(in, line))
            if (!line.empty()) ++lines;
        CHECK(lines == 1 + 2 * 18);  // meta + folds * (20% of 90, stratified)
    }

    SUBCASE("fraction regime") {
        REQUIRE(run(common + " --method lp --fraction 0.5 --out-adapter " + kDir +
                    "/lp2.json --out-predictions " + kDir + "/lp2_preds.jsonl") == 0);
    }

    SUBCASE("tip-adapter-f and clip-adapter run") {
        REQUIRE(run(common + " --method tip-adapter-f --shots 3 --adapter-epochs 5 "
                             "--out-adapter " +
                    kDir + "/t.json --out-predictions " + kDir + "/t_preds.jsonl") == 0);
        REQUIRE(run(common + " --method clip-adapter --shots 3 --adapter-epochs 5 "
                             "--out-adapter " +
                    kDir + "/c.json --out-predictions " + kDir + "/c_preds.jsonl") == 0);
        const json adapter = json::parse(slurp(kDir + "/c.json"));
        CHECK(adapter["folds"][0].contains("down"));
        CHECK(adapter["folds"][0].contains("up"));
    }

    SUBCASE("both or neither regime flags is a usage error") {
        CHECK(run(common + " --method lp --shots 3 --fraction 0.5 --out-adapter " + kDir +
                  "/x.json --out-predictions " + kDir + "/x.jsonl") == 2);
        CHECK(run(common + " --method lp --out-adapter " + kDir + "/x.json --out-predictions " +
                  kDir + "/x.jsonl") == 2);
    }
}

TEST_CASE("pretrain config file applies, flags win") {
    setup();
    std::ofstream(kDir + "/cfg.json") << R"({"epochs": 2, "batch_size": 8, "joint_dim": 12})";
    REQUIRE(run("pretrain --manifest " + kDir + "/manifest.jsonl --image-emb " + kDir +
                "/images.emb --prompt-bank " + kDir + "/prompt_bank.json --registry " + kDir +
                "/registry.json --config " + kDir + "/cfg.json --text-dim 24 --out " + kDir +
                "/model_cfg.json --trace " + kDir + "/trace_cfg.jsonl") == 0);
    std::ifstream in(kDir + "/trace_cfg.jsonl");
    std::string line;
    std::size_t epochs = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++epochs;
    CHECK(epochs == 2);

    // explicit flag overrides the config file
    REQUIRE(run("pretrain --manifest " + kDir + "/manifest.jsonl --image-emb " + kDir +
                "/images.emb --prompt-bank " + kDir + "/prompt_bank.json --registry " + kDir +
                "/registry.json --config " + kDir + "/cfg.json --epochs 3 --text-dim 24 --out " +
                kDir + "/model_cfg2.json --trace " + kDir + "/trace_cfg2.jsonl") == 0);
    std::ifstream in2(kDir + "/trace_cfg2.jsonl");
    epochs = 0;
    while (std::getline(in2, line))
        if (!line.empty()) ++epochs;
    CHECK(epochs == 3);
}
