// Command-line surface: pretrain, zeroshot, adapt, eval, gradcheck, synth.
// Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "palign/adapters.hpp"
#include "palign/contrastive.hpp"
#include "palign/errors.hpp"
#include "palign/evalkit.hpp"
#include "palign/io.hpp"
#include "palign/parallel.hpp"
#include "palign/prompt_bank.hpp"
#include "palign/text_featurizer.hpp"
#include "palign/trainer.hpp"
#include "palign/zeroshot.hpp"

using nlohmann::json;
using namespace palign;

namespace {

constexpr std::uint64_t kDefaultFeaturizerSeed = 0xFEA7;

struct GlobalFlags {
    std::uint64_t seed = 0;
    std::string precision = "f64";
    std::size_t threads = 1;
};

Precision parse_precision(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw ConfigError("unknown precision \"" + s + "\" (expected f32|f64)");
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

/// Resolves class keys against the registry; unknown keys become novel
/// categories with fresh ids past the registry (zero-shot to unseen classes).
std::vector<Category> resolve_classes(const std::string& csv, const CategoryRegistry& registry) {
    std::vector<Category> out;
    int next_novel = static_cast<int>(registry.size());
    for (const auto& key : split_csv(csv)) {
        if (const Category* c = registry.resolve(key)) {
            out.push_back(*c);
        } else {
            out.push_back(Category{next_novel++, key, key});
        }
    }
    if (out.empty()) throw ConfigError("--classes resolved to an empty list");
    std::set<std::string> names;
    for (const auto& c : out)
        if (!names.insert(c.name).second)
            throw ConfigError("--classes lists \"" + c.name + "\" twice");
    return out;
}

TextFeaturizer make_featurizer(std::size_t dim, std::uint64_t seed) {
    return [dim, seed](const std::string& text) {
        return surrogate_text_features(text, dim, seed);
    };
}

json fold_metrics_to_json(const FoldMetrics& fm, const std::vector<std::string>& class_names) {
    json j;
    j["aca"] = fm.aca;
    json per_class = json::object();
    for (const auto& [c, acc] : fm.per_class_accuracy) {
        const std::string key = c >= 0 && static_cast<std::size_t>(c) < class_names.size()
                                    ? class_names[static_cast<std::size_t>(c)]
                                    : std::to_string(c);
        per_class[key] = acc;
    }
    j["per_class"] = per_class;
    if (fm.quadratic_kappa) j["kappa"] = *fm.quadratic_kappa;
    if (fm.auc) j["auc"] = *fm.auc;
    return j;
}

json report_to_json(const EvalReport& rep, const std::vector<std::string>& class_names) {
    json j = fold_metrics_to_json(rep.mean, class_names);
    j["folds"] = json::array();
    for (const auto& f : rep.per_fold) j["folds"].push_back(fold_metrics_to_json(f, class_names));
    j["mean"] = fold_metrics_to_json(rep.mean, class_names);
    json stddev;
    stddev["aca"] = rep.stddev.aca;
    if (rep.stddev.quadratic_kappa) stddev["kappa"] = *rep.stddev.quadratic_kappa;
    if (rep.stddev.auc) stddev["auc"] = *rep.stddev.auc;
    j["std"] = stddev;
    return j;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out << text;
    if (!out) throw FormatError("short write to " + path);
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

struct PretrainArgs {
    std::string manifest, image_emb, prompt_bank, registry, config, out, trace;
    std::size_t joint_dim = 512;
    std::size_t text_dim = 64;
    std::uint64_t featurizer_seed = kDefaultFeaturizerSeed;
    TrainConfig train;
};

int run_pretrain(const PretrainArgs& args_in, const GlobalFlags& g,
                 const std::set<std::string>& explicit_flags) {
    PretrainArgs args = args_in;
    args.train.seed = g.seed;
    args.train.precision = parse_precision(g.precision);

    if (!args.config.empty()) {
        std::ifstream in(args.config);
        if (!in) throw FormatError("cannot open config: " + args.config);
        json cfg;
        try {
            cfg = json::parse(in);
        } catch (const json::parse_error& e) {
            throw FormatError("config " + args.config + ": " + e.what());
        }
        const auto maybe = [&](const char* key, auto& slot) {
            if (cfg.contains(key) && !explicit_flags.count(key))
                slot = cfg[key].get<std::decay_t<decltype(slot)>>();
        };
        maybe("batch_size", args.train.batch_size);
        maybe("epochs", args.train.epochs);
        maybe("base_lr", args.train.base_lr);
        maybe("weight_decay", args.train.weight_decay);
        maybe("warmup_epochs", args.train.warmup_epochs);
        maybe("joint_dim", args.joint_dim);
        maybe("text_dim", args.text_dim);
        maybe("featurizer_seed", args.featurizer_seed);
        if (cfg.contains("seed") && !explicit_flags.count("seed"))
            args.train.seed = cfg["seed"].get<std::uint64_t>();
        if (cfg.contains("precision") && !explicit_flags.count("precision"))
            args.train.precision = parse_precision(cfg["precision"].get<std::string>());
    }

    const CategoryRegistry registry = CategoryRegistry::load(args.registry);
    const PromptBank bank = PromptBank::load(args.prompt_bank);
    const EmbeddingFile emb = read_embeddings(args.image_emb);
    const auto dataset = read_manifest(args.manifest, registry, emb.count);
    if (dataset.empty()) throw ValidationError("manifest has no records: " + args.manifest);

    ModelState init = init_model(args.joint_dim, emb.dim, args.text_dim, args.train.seed);
    init.featurizer_seed = args.featurizer_seed;

    const auto featurizer = make_featurizer(args.text_dim, args.featurizer_seed);
    const TrainResult result =
        train(dataset, emb.as_double(), bank, registry, featurizer, args.train, std::move(init));

    std::string trace_text;
    for (const auto& e : result.trace) {
        json line;
        line["epoch"] = e.epoch;
        line["mean_loss"] = e.mean_loss;
        line["lr"] = e.lr;
        line["tau"] = e.tau;
        trace_text += line.dump() + "\n";
    }
    std::cout << trace_text;
    if (!args.trace.empty()) write_text(args.trace, trace_text);

    ModelState final_model = result.model;
    final_model.featurizer_seed = args.featurizer_seed;
    save_model(final_model, args.out);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// zeroshot
// ---------------------------------------------------------------------------

struct ZeroshotArgs {
    std::string model, manifest, image_emb, prompt_bank, registry, mode = "ek", classes, out;
};

int run_zeroshot(const ZeroshotArgs& args, const GlobalFlags& g) {
    const CategoryRegistry registry = CategoryRegistry::load(args.registry);
    const PromptBank bank = PromptBank::load(args.prompt_bank);
    const ModelState model = load_model(args.model);
    const EmbeddingFile emb = read_embeddings(args.image_emb);
    const auto records = read_manifest(args.manifest, registry, emb.count);
    const PromptMode mode = parse_prompt_mode(args.mode);

    std::vector<Category> classes;
    if (mode != PromptMode::anomaly) {
        if (args.classes.empty())
            throw ConfigError("--classes is required for naive and ek modes");
        classes = resolve_classes(args.classes, registry);
    }

    const auto featurizer = make_featurizer(model.text_dim(), model.featurizer_seed);
    const auto protos = class_prototypes(bank, featurizer, model, classes, mode);

    const MatD features = emb.as_double();
    std::vector<ZeroShotPrediction> preds(records.size());
    std::vector<std::string> errors(records.size());
    parallel_for(records.size(), g.threads, [&](std::size_t i) {
        try {
            preds[i] = predict(model, features.row_copy(records[i].image_feature_index), protos);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    });
    for (std::size_t i = 0; i < records.size(); ++i)
        if (!errors[i].empty())
            throw NumericalError("prediction failed for \"" + records[i].sample_id +
                                 "\": " + errors[i]);

    json meta;
    meta["type"] = "meta";
    meta["mode"] = args.mode;
    meta["classes"] = json::array();
    for (const auto& p : protos) meta["classes"].push_back(p.category.name);
    std::string out_text = meta.dump() + "\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
        json line;
        line["id"] = records[i].sample_id;
        line["class"] = protos[preds[i].class_index].category.name;
        line["probabilities"] = preds[i].probabilities;
        out_text += line.dump() + "\n";
    }
    write_text(args.out, out_text);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// adapt
// ---------------------------------------------------------------------------

struct AdaptArgs {
    std::string method, model, manifest, image_emb, prompt_bank, registry, classes;
    std::string features = "vision";
    std::string mode = "ek";
    std::string out_adapter, out_predictions;
    std::size_t shots = 0;
    double fraction = 0.0;
    std::size_t folds = 5;
    double test_fraction = 0.20;
    double alpha = 1.0, beta = 5.5, residual_ratio = 0.2;
    std::size_t bottleneck = 0;  // 0 = joint_dim / 4
    double lambda = -1.0;
    double adapter_lr = 1e-3;
    std::size_t adapter_epochs = 20;
};

json matrix_json(const MatD& m) {
    json j;
    j["rows"] = m.rows();
    j["cols"] = m.cols();
    j["data_hex"] = hex_encode(m.data());
    return j;
}

int run_adapt(const AdaptArgs& args, const GlobalFlags& g) {
    if ((args.shots == 0) == (args.fraction == 0.0))
        throw ConfigError("exactly one of --shots or --fraction is required");
    const CategoryRegistry registry = CategoryRegistry::load(args.registry);
    const PromptBank bank = PromptBank::load(args.prompt_bank);
    const ModelState model = load_model(args.model);
    const EmbeddingFile emb = read_embeddings(args.image_emb);
    const auto records = read_manifest(args.manifest, registry, emb.count);
    const FeatureChoice choice = parse_feature_choice(args.features);

    if (args.classes.empty()) throw ConfigError("--classes is required");
    const auto classes = resolve_classes(args.classes, registry);
    std::map<int, int> to_local;
    std::vector<std::string> class_names;
    for (std::size_t i = 0; i < classes.size(); ++i) {
        to_local[classes[i].id] = static_cast<int>(i);
        class_names.push_back(classes[i].name);
    }

    const MatD all_features = emb.as_double();
    MatD features(records.size(), emb.dim);
    std::vector<int> labels(records.size());
    std::vector<std::string> ids(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        features.set_row(i, all_features.row_copy(records[i].image_feature_index));
        auto it = to_local.find(records[i].label);
        if (it == to_local.end())
            throw ValidationError("manifest label \"" + registry.at(records[i].label).name +
                                  "\" is not in --classes");
        labels[i] = it->second;
        ids[i] = records[i].sample_id;
    }

    SplitPlan plan;
    plan.test_fraction = args.test_fraction;
    plan.folds = args.folds;
    plan.seed = g.seed;
    plan.regime = args.shots > 0 ? Regime::k_shot(args.shots) : Regime::of_fraction(args.fraction);
    const Splits splits = make_splits(labels, plan);

    const bool needs_prototypes = args.method != "lp";
    std::vector<ClassPrototype> protos;
    if (needs_prototypes) {
        const auto featurizer = make_featurizer(model.text_dim(), model.featurizer_seed);
        protos = class_prototypes(bank, featurizer, model, classes, parse_prompt_mode(args.mode));
        // prototype order defines the logit order; align ids with local indices
        for (std::size_t i = 0; i < protos.size(); ++i)
            protos[i].category.id = static_cast<int>(i);
    }
    const std::size_t bottleneck =
        args.bottleneck > 0 ? args.bottleneck : std::max<std::size_t>(1, model.joint_dim() / 4);

    json adapter_out;
    adapter_out["method"] = args.method;
    adapter_out["feature_choice"] = to_string(choice);
    adapter_out["classes"] = class_names;
    adapter_out["folds"] = json::array();

    std::string pred_text;
    json meta;
    meta["type"] = "meta";
    meta["classes"] = class_names;
    meta["method"] = args.method;
    pred_text += meta.dump() + "\n";

    std::vector<FoldMetrics> fold_stats;
    for (std::size_t f = 0; f < splits.fold_support.size(); ++f) {
        const auto& support_idx = splits.fold_support[f];
        MatD support_raw(support_idx.size(), emb.dim);
        std::vector<int> support_labels;
        for (std::size_t i = 0; i < support_idx.size(); ++i) {
            support_raw.set_row(i, features.row_copy(support_idx[i]));
            support_labels.push_back(labels[support_idx[i]]);
        }

        // fit per method, then one shared prediction pass over the test set
        std::function<std::pair<int, VecD>(const VecD&)> predict_one;
        json fold_adapter;
        if (args.method == "lp") {
            MatD support_feats(support_idx.size(), 0);
            std::vector<VecD> rows;
            for (std::size_t i = 0; i < support_idx.size(); ++i)
                rows.push_back(extract_features(model, support_raw.row_copy(i), choice));
            support_feats = MatD(rows.size(), rows[0].size());
            for (std::size_t i = 0; i < rows.size(); ++i) support_feats.set_row(i, rows[i]);
            ProbeFitConfig pc;
            pc.l2_lambda = args.lambda;
            pc.seed = g.seed;
            const auto fit = fit_linear_probe(support_feats, support_labels, classes.size(), pc,
                                              choice);
            const LinearProbe probe = fit.probe;
            fold_adapter["weights"] = matrix_json(probe.weights);
            fold_adapter["bias_hex"] = hex_encode(probe.bias);
            fold_adapter["l2_lambda"] = probe.l2_lambda;
            predict_one = [probe, &model, choice](const VecD& raw) {
                const auto p = predict_linear_probe(probe, extract_features(model, raw, choice));
                return std::pair<int, VecD>{p.class_index, p.probabilities};
            };
        } else if (args.method == "tip-adapter" || args.method == "tip-adapter-f") {
            TipCache cache = build_tip_cache(model, support_raw, support_labels, classes.size(),
                                             args.alpha, args.beta,
                                             args.method == "tip-adapter-f");
            if (args.method == "tip-adapter-f") {
                AdapterFitConfig ac;
                ac.lr = args.adapter_lr;
                ac.epochs = args.adapter_epochs;
                ac.seed = g.seed;
                cache = fit_tip_adapter_f(cache, model, protos, support_raw, support_labels, ac)
                            .cache;
            }
            fold_adapter["keys"] = matrix_json(cache.keys);
            fold_adapter["values"] = matrix_json(cache.values);
            fold_adapter["alpha"] = cache.alpha;
            fold_adapter["beta"] = cache.beta;
            predict_one = [cache, &model, &protos](const VecD& raw) {
                const auto p = tip_adapter_predict(cache, model, protos, raw);
                return std::pair<int, VecD>{p.class_index, softmax(p.logits)};
            };
        } else if (args.method == "clip-adapter") {
            ClipAdapterHead head =
                init_clip_adapter(model.joint_dim(), bottleneck, args.residual_ratio, g.seed);
            AdapterFitConfig ac;
            ac.lr = args.adapter_lr;
            ac.epochs = args.adapter_epochs;
            ac.seed = g.seed;
            head = fit_clip_adapter(head, model, protos, support_raw, support_labels, ac).head;
            fold_adapter["down"] = matrix_json(head.down);
            fold_adapter["up"] = matrix_json(head.up);
            fold_adapter["residual_ratio"] = head.residual_ratio;
            predict_one = [head, &model, &protos](const VecD& raw) {
                const auto p = clip_adapter_predict(head, model, protos, raw);
                return std::pair<int, VecD>{p.class_index, softmax(p.logits)};
            };
        } else {
            throw ConfigError("unknown method \"" + args.method +
                              "\" (expected lp|clip-adapter|tip-adapter|tip-adapter-f)");
        }
        adapter_out["folds"].push_back(fold_adapter);

        std::vector<int> y_true, y_pred;
        for (std::size_t i : splits.test_indices) {
            const auto [cls, probs] = predict_one(features.row_copy(i));
            y_true.push_back(labels[i]);
            y_pred.push_back(cls);
            json line;
            line["fold"] = f;
            line["id"] = ids[i];
            line["class"] = class_names[static_cast<std::size_t>(cls)];
            line["probabilities"] = probs;
            pred_text += line.dump() + "\n";
        }
        fold_stats.push_back(fold_metrics(y_true, y_pred, TaskKind::multiclass, classes.size()));
    }

    write_text(args.out_adapter, adapter_out.dump(2) + "\n");
    write_text(args.out_predictions, pred_text);
    std::cout << report_to_json(aggregate_folds(fold_stats), class_names).dump(2) << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string predictions, labels, registry, task = "multiclass", positive, out;
    bool anomaly_merge = false;
};

int run_eval(const EvalArgs& args) {
    const CategoryRegistry registry = CategoryRegistry::load(args.registry);
    const TaskKind task = parse_task_kind(args.task);

    std::ifstream in(args.predictions);
    if (!in) throw FormatError("cannot open predictions: " + args.predictions);
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> class_names;
    struct Pred {
        std::string id;
        int class_index;
        VecD probabilities;
        std::size_t fold;
    };
    std::vector<Pred> preds;
    std::map<std::string, int> name_to_index;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError("predictions " + args.predictions + ":" + std::to_string(line_no) +
                              ": " + e.what());
        }
        if (obj.value("type", "") == "meta") {
            class_names = obj.at("classes").get<std::vector<std::string>>();
            for (std::size_t i = 0; i < class_names.size(); ++i)
                name_to_index[class_names[i]] = static_cast<int>(i);
            continue;
        }
        if (class_names.empty())
            throw FormatError("predictions " + args.predictions +
                              ": missing meta line with the class list");
        Pred p;
        p.id = obj.at("id").get<std::string>();
        const std::string cls = obj.at("class").get<std::string>();
        auto it = name_to_index.find(cls);
        if (it == name_to_index.end())
            throw FormatError("predictions " + args.predictions + ":" + std::to_string(line_no) +
                              ": class \"" + cls + "\" not in the meta class list");
        p.class_index = it->second;
        p.probabilities = obj.value("probabilities", VecD{});
        p.fold = obj.value("fold", std::size_t{0});
        preds.push_back(std::move(p));
    }
    if (preds.empty()) throw ValidationError("predictions file has no prediction lines");

    int positive_index = -1;
    if (task == TaskKind::binary) {
        if (args.positive.empty())
            throw ConfigError("--positive <class> is required for binary tasks");
        const Category* pc = registry.resolve(args.positive);
        const std::string pname = pc ? pc->name : args.positive;
        auto it = name_to_index.find(pname);
        if (it == name_to_index.end())
            throw ConfigError("--positive \"" + args.positive +
                              "\" is not among the prediction classes");
        positive_index = it->second;
    }
    if (args.anomaly_merge && (task != TaskKind::binary || class_names.size() != 2))
        throw ConfigError("--anomaly-merge requires --task binary over two prediction classes");

    // Ground truth: manifest id -> local class index (single-label). Under
    // --anomaly-merge every label other than the negative class is the
    // positive class, and original labels are kept for per-class breakdowns.
    const auto records = read_manifest(args.labels, registry);
    std::map<std::string, int> truth;
    std::map<std::string, int> truth_original;
    const int negative_index = positive_index == 0 ? 1 : 0;
    for (const auto& rec : records) {
        const std::string name = registry.at(rec.label).name;
        int idx;
        if (args.anomaly_merge) {
            idx = name == class_names[static_cast<std::size_t>(negative_index)] ? negative_index
                                                                                : positive_index;
        } else {
            auto it = name_to_index.find(name);
            if (it == name_to_index.end())
                throw ValidationError("label \"" + name + "\" of sample \"" + rec.sample_id +
                                      "\" is not among the prediction classes");
            idx = it->second;
        }
        if (!truth.emplace(rec.sample_id, idx).second)
            throw ValidationError("duplicate sample id \"" + rec.sample_id +
                                  "\" in labels; evaluation is single-label");
        truth_original[rec.sample_id] = rec.label;
    }

    std::map<std::size_t, std::vector<const Pred*>> by_fold;
    for (const auto& p : preds) by_fold[p.fold].push_back(&p);

    std::vector<FoldMetrics> folds;
    std::vector<AnomalyAccuracy> anomaly_folds;
    for (const auto& [fold, fold_preds] : by_fold) {
        std::vector<int> y_true, y_pred, y_true_orig;
        VecD scores;
        for (const Pred* p : fold_preds) {
            auto it = truth.find(p->id);
            if (it == truth.end())
                throw ValidationError("prediction id \"" + p->id + "\" missing from labels");
            if (task == TaskKind::binary) {
                y_true.push_back(it->second == positive_index ? 1 : 0);
                y_pred.push_back(p->class_index == positive_index ? 1 : 0);
                if (static_cast<std::size_t>(positive_index) >= p->probabilities.size())
                    throw ValidationError("prediction for \"" + p->id +
                                          "\" lacks a probability for the positive class");
                scores.push_back(p->probabilities[static_cast<std::size_t>(positive_index)]);
            } else {
                y_true.push_back(it->second);
                y_pred.push_back(p->class_index);
            }
            y_true_orig.push_back(truth_original.at(p->id));
        }
        folds.push_back(fold_metrics(y_true, y_pred, task,
                                     task == TaskKind::binary ? 2 : class_names.size(),
                                     task == TaskKind::binary ? &scores : nullptr));
        if (args.anomaly_merge) {
            // Merged vs unmerged averages against the original multi-class truth.
            const Category* neg =
                registry.find_name(class_names[static_cast<std::size_t>(negative_index)]);
            anomaly_folds.push_back(
                anomaly_accuracy(y_true_orig, neg ? neg->id : -1, y_pred));
        }
    }

    std::vector<std::string> out_names = class_names;
    if (task == TaskKind::binary) out_names = {"negative", "positive"};
    json report = report_to_json(aggregate_folds(folds), out_names);
    if (args.anomaly_merge) {
        double merged = 0.0, unmerged = 0.0;
        std::map<int, double> per_orig;
        for (const auto& af : anomaly_folds) {
            merged += af.merged_aca / static_cast<double>(anomaly_folds.size());
            unmerged += af.unmerged_average / static_cast<double>(anomaly_folds.size());
            for (const auto& [c, acc] : af.per_class_accuracy)
                per_orig[c] += acc / static_cast<double>(anomaly_folds.size());
        }
        json anomaly;
        anomaly["merged_aca"] = merged;
        anomaly["unmerged_average"] = unmerged;
        json per_class = json::object();
        for (const auto& [c, acc] : per_orig) per_class[registry.at(c).name] = acc;
        anomaly["per_original_class"] = per_class;
        report["anomaly"] = anomaly;
    }
    write_text(args.out, report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckArgs {
    std::size_t trials = 200;
    std::size_t max_batch = 6;
    std::size_t max_dim = 8;
    double tolerance = 1e-4;
    double step = 1e-6;
    bool verbose = false;
};

int run_gradcheck(const GradcheckArgs& args, const GlobalFlags& g) {
    Rng rng = make_stream_rng(g.seed, 0x96AD);
    double worst = 0.0;
    std::size_t worst_trial = 0;

    for (std::size_t trial = 0; trial < args.trials; ++trial) {
        const std::size_t n = 1 + rng.uniform_int(args.max_batch);
        const std::size_t du = 1 + rng.uniform_int(args.max_dim);
        const std::size_t dv = 1 + rng.uniform_int(args.max_dim);
        const std::size_t joint = 1 + rng.uniform_int(args.max_dim);

        ModelState model;
        model.vision_head.weights = MatD(joint, du);
        model.text_head.weights = MatD(joint, dv);
        for (auto& w : model.vision_head.weights.data()) w = 0.5 * rng.normal();
        for (auto& w : model.text_head.weights.data()) w = 0.5 * rng.normal();
        model.vision_head.bias.resize(joint);
        model.text_head.bias.resize(joint);
        for (auto& b : model.vision_head.bias) b = 0.1 * rng.normal();
        for (auto& b : model.text_head.bias) b = 0.1 * rng.normal();
        model.log_tau = rng.uniform(-1.0, 1.5);

        MatD X(n, du), T(n, dv);
        for (auto& x : X.data()) x = rng.normal();
        for (auto& t : T.data()) t = rng.normal();
        std::vector<int> labels(n);
        for (auto& l : labels) l = static_cast<int>(rng.uniform_int(3));

        const auto analytic = total_loss_and_grads(model, X, T, labels);

        const auto loss_at = [&](ModelState& m) {
            return total_loss_and_grads(m, X, T, labels).loss_value;
        };
        ModelState m = model;
        const auto central = [&](double& param) {
            const double orig = param;
            param = orig + args.step;
            const double lp = loss_at(m);
            param = orig - args.step;
            const double lm = loss_at(m);
            param = orig;
            return (lp - lm) / (2.0 * args.step);
        };
        const auto rel = [](double a, double b) {
            return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-3});
        };

        double trial_worst = 0.0;
        for (std::size_t i = 0; i < m.vision_head.weights.size(); ++i)
            trial_worst = std::max(trial_worst, rel(analytic.d_vision_weights.data()[i],
                                                    central(m.vision_head.weights.data()[i])));
        for (std::size_t i = 0; i < m.vision_head.bias.size(); ++i)
            trial_worst = std::max(
                trial_worst, rel(analytic.d_vision_bias[i], central(m.vision_head.bias[i])));
        for (std::size_t i = 0; i < m.text_head.weights.size(); ++i)
            trial_worst = std::max(trial_worst, rel(analytic.d_text_weights.data()[i],
                                                    central(m.text_head.weights.data()[i])));
        for (std::size_t i = 0; i < m.text_head.bias.size(); ++i)
            trial_worst =
                std::max(trial_worst, rel(analytic.d_text_bias[i], central(m.text_head.bias[i])));
        trial_worst = std::max(trial_worst, rel(analytic.d_log_tau, central(m.log_tau)));

        if (args.verbose)
            std::printf("trial %3zu  |B|=%zu du=%zu dv=%zu joint=%zu  max rel err %.3e\n", trial,
                        n, du, dv, joint, trial_worst);
        if (trial_worst > worst) {
            worst = trial_worst;
            worst_trial = trial;
        }
    }

    std::printf("gradcheck: %zu trials, worst per-coordinate relative error %.3e (trial %zu), "
                "tolerance %.1e\n",
                args.trials, worst, worst_trial, args.tolerance);
    if (worst >= args.tolerance) {
        std::fprintf(stderr, "gradcheck FAILED\n");
        return kExitNumerical;
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::size_t classes = 4;
    std::size_t per_class = 100;
    std::size_t dim = 16;
    double separation = 4.0;
    double noise = 0.25;
    std::size_t prompts = 2;
    std::string out_dir;
};

int run_synth(const SynthArgs& args, const GlobalFlags& g) {
    const SynthDataset data = synth_dataset(args.classes, args.per_class, args.dim,
                                            args.separation, args.noise, g.seed);
    std::filesystem::create_directories(args.out_dir);
    const auto path = [&](const char* name) { return args.out_dir + "/" + name; };

    write_embeddings(path("images.emb"), data.image_features);
    write_embeddings(path("class_text_features.emb"), data.class_text_features);

    json registry = json::array();
    for (std::size_t c = 0; c < args.classes; ++c) {
        json entry;
        entry["abbreviation"] = "S" + std::to_string(c);
        entry["name"] = "synthetic class " + std::to_string(c);
        registry.push_back(entry);
    }
    write_text(path("registry.json"), registry.dump(2) + "\n");

    // Descriptions use class-unique tokens so prompt anchors stay distinct
    // under the hash featurizer.
    json bank;
    bank["naive_template"] = "A fundus photograph of [CLS]";
    json cats = json::object();
    for (std::size_t c = 0; c < args.classes; ++c) {
        json descs = json::array();
        for (std::size_t p = 0; p < args.prompts; ++p)
            descs.push_back("synthfinding" + std::to_string(c) + "x" + std::to_string(p));
        cats["synthetic class " + std::to_string(c)] = descs;
    }
    bank["categories"] = cats;
    write_text(path("prompt_bank.json"), bank.dump(2) + "\n");

    std::string manifest;
    for (std::size_t i = 0; i < data.labels.size(); ++i) {
        json line;
        line["id"] = "synth-" + std::to_string(i);
        line["label"] = "S" + std::to_string(data.labels[i]);
        line["embedding_index"] = i;
        manifest += line.dump() + "\n";
    }
    write_text(path("manifest.jsonl"), manifest);

    std::printf("synth: wrote %zu samples (%zu classes x %zu, dim %zu) to %s\n",
                data.labels.size(), args.classes, args.per_class, args.dim,
                args.out_dir.c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"expert-knowledge prompted contrastive alignment toolkit"};
    app.require_subcommand(1);

    GlobalFlags g;
    app.add_option("--seed", g.seed, "global random seed")->capture_default_str();
    app.add_option("--precision", g.precision, "f32|f64")->capture_default_str();
    app.add_option("--threads", g.threads, "worker threads for batch prediction")
        ->capture_default_str();

    PretrainArgs pre;
    auto* cmd_pre = app.add_subcommand("pretrain", "contrastive pretraining on a manifest");
    cmd_pre->add_option("--manifest", pre.manifest)->required();
    cmd_pre->add_option("--image-emb", pre.image_emb)->required();
    cmd_pre->add_option("--prompt-bank", pre.prompt_bank)->required();
    cmd_pre->add_option("--registry", pre.registry)->required();
    cmd_pre->add_option("--config", pre.config, "JSON training config");
    cmd_pre->add_option("--out", pre.out)->required();
    cmd_pre->add_option("--trace", pre.trace, "also write the JSONL loss trace here");
    cmd_pre->add_option("--joint-dim", pre.joint_dim)->capture_default_str();
    cmd_pre->add_option("--text-dim", pre.text_dim)->capture_default_str();
    cmd_pre->add_option("--featurizer-seed", pre.featurizer_seed)->capture_default_str();
    cmd_pre->add_option("--batch-size", pre.train.batch_size)->capture_default_str();
    cmd_pre->add_option("--epochs", pre.train.epochs)->capture_default_str();
    cmd_pre->add_option("--lr", pre.train.base_lr)->capture_default_str();
    cmd_pre->add_option("--weight-decay", pre.train.weight_decay)->capture_default_str();
    cmd_pre->add_option("--warmup-epochs", pre.train.warmup_epochs)->capture_default_str();

    ZeroshotArgs zs;
    auto* cmd_zs = app.add_subcommand("zeroshot", "prompt-driven classification");
    cmd_zs->add_option("--model", zs.model)->required();
    cmd_zs->add_option("--manifest", zs.manifest)->required();
    cmd_zs->add_option("--image-emb", zs.image_emb)->required();
    cmd_zs->add_option("--prompt-bank", zs.prompt_bank)->required();
    cmd_zs->add_option("--registry", zs.registry)->required();
    cmd_zs->add_option("--mode", zs.mode, "naive|ek|anomaly")->capture_default_str();
    cmd_zs->add_option("--classes", zs.classes, "comma-separated class names or abbreviations");
    cmd_zs->add_option("--out", zs.out)->required();

    AdaptArgs ad;
    auto* cmd_ad = app.add_subcommand("adapt", "few-shot transfer heads over a frozen model");
    cmd_ad->add_option("--method", ad.method, "lp|clip-adapter|tip-adapter|tip-adapter-f")
        ->required();
    cmd_ad->add_option("--model", ad.model)->required();
    cmd_ad->add_option("--manifest", ad.manifest)->required();
    cmd_ad->add_option("--image-emb", ad.image_emb)->required();
    cmd_ad->add_option("--prompt-bank", ad.prompt_bank)->required();
    cmd_ad->add_option("--registry", ad.registry)->required();
    cmd_ad->add_option("--classes", ad.classes)->required();
    cmd_ad->add_option("--features", ad.features, "vision|proj|proj-norm")->capture_default_str();
    cmd_ad->add_option("--mode", ad.mode, "prompt mode for the zero-shot prototypes")
        ->capture_default_str();
    cmd_ad->add_option("--shots", ad.shots, "k support samples per class");
    cmd_ad->add_option("--fraction", ad.fraction, "stratified share of the train pool");
    cmd_ad->add_option("--folds", ad.folds)->capture_default_str();
    cmd_ad->add_option("--test-fraction", ad.test_fraction)->capture_default_str();
    cmd_ad->add_option("--alpha", ad.alpha)->capture_default_str();
    cmd_ad->add_option("--beta", ad.beta)->capture_default_str();
    cmd_ad->add_option("--residual-ratio", ad.residual_ratio)->capture_default_str();
    cmd_ad->add_option("--bottleneck", ad.bottleneck, "0 = joint_dim/4");
    cmd_ad->add_option("--lambda", ad.lambda, "probe L2; negative = 1/n default");
    cmd_ad->add_option("--adapter-lr", ad.adapter_lr)->capture_default_str();
    cmd_ad->add_option("--adapter-epochs", ad.adapter_epochs)->capture_default_str();
    cmd_ad->add_option("--out-adapter", ad.out_adapter)->required();
    cmd_ad->add_option("--out-predictions", ad.out_predictions)->required();

    EvalArgs ev;
    auto* cmd_ev = app.add_subcommand("eval", "metrics over a predictions file");
    cmd_ev->add_option("--predictions", ev.predictions)->required();
    cmd_ev->add_option("--labels", ev.labels, "manifest with ground-truth labels")->required();
    cmd_ev->add_option("--registry", ev.registry)->required();
    cmd_ev->add_option("--task", ev.task, "multiclass|ordinal|binary")->capture_default_str();
    cmd_ev->add_option("--positive", ev.positive, "positive class for binary tasks");
    cmd_ev->add_flag("--anomaly-merge", ev.anomaly_merge,
                     "treat every non-negative ground-truth label as the positive class and "
                     "report merged and unmerged averages");
    cmd_ev->add_option("--out", ev.out)->required();

    GradcheckArgs gc;
    auto* cmd_gc = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
    cmd_gc->add_option("--trials", gc.trials)->capture_default_str();
    cmd_gc->add_option("--max-batch", gc.max_batch)->capture_default_str();
    cmd_gc->add_option("--max-dim", gc.max_dim)->capture_default_str();
    cmd_gc->add_option("--tolerance", gc.tolerance)->capture_default_str();
    cmd_gc->add_option("--step", gc.step)->capture_default_str();
    cmd_gc->add_flag("--verbose", gc.verbose);

    SynthArgs sy;
    auto* cmd_sy = app.add_subcommand("synth", "synthetic dataset generator");
    cmd_sy->add_option("--classes", sy.classes)->capture_default_str();
    cmd_sy->add_option("--per-class", sy.per_class)->capture_default_str();
    cmd_sy->add_option("--dim", sy.dim)->capture_default_str();
    cmd_sy->add_option("--separation", sy.separation)->capture_default_str();
    cmd_sy->add_option("--noise", sy.noise)->capture_default_str();
    cmd_sy->add_option("--prompts", sy.prompts, "EK descriptions per class")
        ->capture_default_str();
    cmd_sy->add_option("--out-dir", sy.out_dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (cmd_pre->parsed()) {
            std::set<std::string> explicit_flags;
            for (const auto* opt : cmd_pre->parse_order()) {
                const std::string name = opt->get_name();
                if (name == "--batch-size") explicit_flags.insert("batch_size");
                if (name == "--epochs") explicit_flags.insert("epochs");
                if (name == "--lr") explicit_flags.insert("base_lr");
                if (name == "--weight-decay") explicit_flags.insert("weight_decay");
                if (name == "--warmup-epochs") explicit_flags.insert("warmup_epochs");
                if (name == "--joint-dim") explicit_flags.insert("joint_dim");
                if (name == "--text-dim") explicit_flags.insert("text_dim");
                if (name == "--featurizer-seed") explicit_flags.insert("featurizer_seed");
            }
            for (const auto* opt : app.parse_order()) {
                if (opt->get_name() == "--seed") explicit_flags.insert("seed");
                if (opt->get_name() == "--precision") explicit_flags.insert("precision");
            }
            return run_pretrain(pre, g, explicit_flags);
        }
        if (cmd_zs->parsed()) return run_zeroshot(zs, g);
        if (cmd_ad->parsed()) return run_adapt(ad, g);
        if (cmd_ev->parsed()) return run_eval(ev);
        if (cmd_gc->parsed()) return run_gradcheck(gc, g);
        if (cmd_sy->parsed()) return run_synth(sy, g);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e);
    }
    return kExitUsage;
}
