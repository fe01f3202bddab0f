#include "palign/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "palign/errors.hpp"
#include "palign/zeroshot.hpp"

namespace palign {

namespace {

std::map<int, std::vector<std::size_t>> group_by_class(const std::vector<int>& labels) {
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
    return groups;
}

/// Stratified apportionment by the largest-remainder rule: per-class counts
/// whose total equals round(p * total), each capped by the class size.
std::map<int, std::size_t> apportion(const std::map<int, std::vector<std::size_t>>& groups,
                                     double p) {
    std::size_t total = 0;
    for (const auto& [c, idx] : groups) total += idx.size();
    std::size_t want = static_cast<std::size_t>(std::llround(p * static_cast<double>(total)));

    std::map<int, std::size_t> take;
    std::vector<std::pair<double, int>> remainders;
    std::size_t assigned = 0;
    for (const auto& [c, idx] : groups) {
        const double target = p * static_cast<double>(idx.size());
        const std::size_t base = static_cast<std::size_t>(std::floor(target));
        take[c] = std::min(base, idx.size());
        assigned += take[c];
        remainders.push_back({target - static_cast<double>(base), c});
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (const auto& [frac, c] : remainders) {
        if (assigned >= want) break;
        if (take[c] < groups.at(c).size()) {
            ++take[c];
            ++assigned;
        }
    }
    return take;
}

}  // namespace

Splits make_splits(const std::vector<int>& labels, const SplitPlan& plan) {
    if (labels.empty()) throw ValidationError("make_splits: empty dataset");
    if (plan.test_fraction < 0.0 || plan.test_fraction >= 1.0)
        throw ConfigError("make_splits: test_fraction must lie in [0, 1)");
    if (plan.folds == 0) throw ConfigError("make_splits: folds must be positive");
    if (plan.regime.kind == Regime::Kind::fraction &&
        (plan.regime.fraction <= 0.0 || plan.regime.fraction > 1.0))
        throw ConfigError("make_splits: fraction must lie in (0, 1]");
    if (plan.regime.kind == Regime::Kind::shots && plan.regime.shots == 0)
        throw ConfigError("make_splits: shots must be positive");

    const auto groups = group_by_class(labels);

    // Fixed stratified test split; depends only on (labels, fraction, seed) so
    // it is identical across regimes and folds.
    Splits out;
    Rng test_rng = make_stream_rng(plan.seed, 0x7E57);
    const auto test_take = apportion(groups, plan.test_fraction);
    std::map<int, std::vector<std::size_t>> pool;
    for (const auto& [c, idx] : groups) {
        std::vector<std::size_t> shuffled = idx;
        test_rng.shuffle(shuffled);
        const std::size_t t = test_take.at(c);
        out.test_indices.insert(out.test_indices.end(), shuffled.begin(), shuffled.begin() + t);
        pool[c].assign(shuffled.begin() + t, shuffled.end());
    }
    std::sort(out.test_indices.begin(), out.test_indices.end());

    const auto pool_take = plan.regime.kind == Regime::Kind::fraction
                               ? apportion(pool, plan.regime.fraction)
                               : std::map<int, std::size_t>{};

    for (std::size_t f = 0; f < plan.folds; ++f) {
        Rng fold_rng = make_stream_rng(plan.seed, 1000 + f);
        std::vector<std::size_t> support;
        for (const auto& [c, idx] : pool) {
            std::vector<std::size_t> shuffled = idx;
            fold_rng.shuffle(shuffled);
            std::size_t k;
            if (plan.regime.kind == Regime::Kind::shots) {
                k = plan.regime.shots;
                if (shuffled.size() < k)
                    throw ValidationError("make_splits: class " + std::to_string(c) + " has only " +
                                          std::to_string(shuffled.size()) +
                                          " train samples, need k=" + std::to_string(k));
            } else {
                k = pool_take.at(c);
            }
            support.insert(support.end(), shuffled.begin(), shuffled.begin() + k);
        }
        std::sort(support.begin(), support.end());
        out.fold_support.push_back(std::move(support));
    }
    return out;
}

std::map<int, double> per_class_accuracy(const std::vector<int>& y_true,
                                         const std::vector<int>& y_pred) {
    if (y_true.empty() || y_true.size() != y_pred.size())
        throw ValidationError("per_class_accuracy: empty input or length mismatch");
    std::map<int, std::pair<std::size_t, std::size_t>> counts;  // class -> (correct, total)
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        auto& [correct, tot] = counts[y_true[i]];
        ++tot;
        if (y_true[i] == y_pred[i]) ++correct;
    }
    std::map<int, double> out;
    for (const auto& [c, ct] : counts)
        out[c] = static_cast<double>(ct.first) / static_cast<double>(ct.second);
    return out;
}

double metric_aca(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
    const auto per_class = per_class_accuracy(y_true, y_pred);
    double sum = 0.0;
    for (const auto& [c, acc] : per_class) sum += acc;
    return sum / static_cast<double>(per_class.size());
}

double metric_quadratic_kappa(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                              std::size_t n_grades) {
    if (y_true.empty() || y_true.size() != y_pred.size())
        throw ValidationError("metric_quadratic_kappa: empty input or length mismatch");
    if (n_grades == 0) throw ConfigError("metric_quadratic_kappa: n_grades must be positive");
    for (std::size_t i = 0; i < y_true.size(); ++i)
        if (y_true[i] < 0 || static_cast<std::size_t>(y_true[i]) >= n_grades || y_pred[i] < 0 ||
            static_cast<std::size_t>(y_pred[i]) >= n_grades)
            throw ValidationError("metric_quadratic_kappa: grade out of range at index " +
                                  std::to_string(i));

    MatD observed(n_grades, n_grades);
    VecD row_marg(n_grades, 0.0), col_marg(n_grades, 0.0);
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        observed(static_cast<std::size_t>(y_true[i]), static_cast<std::size_t>(y_pred[i])) += 1.0;
        row_marg[static_cast<std::size_t>(y_true[i])] += 1.0;
        col_marg[static_cast<std::size_t>(y_pred[i])] += 1.0;
    }
    const double n = static_cast<double>(y_true.size());
    const double denom_w =
        n_grades > 1 ? static_cast<double>((n_grades - 1) * (n_grades - 1)) : 1.0;
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n_grades; ++i)
        for (std::size_t j = 0; j < n_grades; ++j) {
            const double w = static_cast<double>((i - j) * (i - j)) / denom_w;
            num += w * observed(i, j);
            den += w * row_marg[i] * col_marg[j] / n;
        }
    if (den == 0.0) {
        // All mass on one grade: perfect agreement is the only consistent case.
        if (num == 0.0) return 1.0;
        throw NumericalError("metric_quadratic_kappa: degenerate marginals with disagreement");
    }
    return 1.0 - num / den;
}

double metric_auc(const std::vector<int>& y_true, const VecD& scores) {
    if (y_true.empty() || y_true.size() != scores.size())
        throw ValidationError("metric_auc: empty input or length mismatch");
    std::size_t n_pos = 0, n_neg = 0;
    for (int y : y_true) {
        if (y == 1) ++n_pos;
        else if (y == 0) ++n_neg;
        else throw ValidationError("metric_auc: labels must be 0 or 1");
    }
    if (n_pos == 0 || n_neg == 0)
        throw ValidationError("metric_auc: both classes must be present");

    // Midrank formulation of the Mann-Whitney statistic; exact under ties.
    std::vector<std::size_t> order(y_true.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            if (y_true[order[k]] == 1) rank_sum_pos += midrank;
        i = j + 1;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                        static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

TaskKind parse_task_kind(const std::string& s) {
    if (s == "multiclass") return TaskKind::multiclass;
    if (s == "ordinal") return TaskKind::ordinal;
    if (s == "binary") return TaskKind::binary;
    throw ConfigError("unknown task \"" + s + "\" (expected multiclass|ordinal|binary)");
}

FoldMetrics fold_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                         TaskKind task, std::size_t n_classes, const VecD* scores) {
    FoldMetrics fm;
    fm.per_class_accuracy = per_class_accuracy(y_true, y_pred);
    double sum = 0.0;
    for (const auto& [c, acc] : fm.per_class_accuracy) sum += acc;
    fm.aca = sum / static_cast<double>(fm.per_class_accuracy.size());
    if (task == TaskKind::ordinal)
        fm.quadratic_kappa = metric_quadratic_kappa(y_true, y_pred, n_classes);
    if (task == TaskKind::binary) {
        if (!scores) throw ConfigError("fold_metrics: binary task requires scores");
        fm.auc = metric_auc(y_true, *scores);
    }
    return fm;
}

EvalReport aggregate_folds(const std::vector<FoldMetrics>& folds) {
    if (folds.empty()) throw ValidationError("aggregate_folds: no folds");
    EvalReport rep;
    rep.per_fold = folds;

    const auto mean_std = [&](auto getter) -> std::pair<std::optional<double>, double> {
        double s = 0.0, s2 = 0.0;
        std::size_t count = 0;
        for (const auto& f : folds) {
            const std::optional<double> v = getter(f);
            if (!v) return {std::nullopt, 0.0};
            s += *v;
            s2 += *v * *v;
            ++count;
        }
        const double mean = s / static_cast<double>(count);
        const double var = std::max(0.0, s2 / static_cast<double>(count) - mean * mean);
        return {mean, std::sqrt(var)};
    };

    const auto [aca_mean, aca_std] =
        mean_std([](const FoldMetrics& f) { return std::optional<double>(f.aca); });
    rep.mean.aca = *aca_mean;
    rep.stddev.aca = aca_std;
    const auto [kappa_mean, kappa_std] =
        mean_std([](const FoldMetrics& f) { return f.quadratic_kappa; });
    if (kappa_mean) {
        rep.mean.quadratic_kappa = kappa_mean;
        rep.stddev.quadratic_kappa = kappa_std;
    }
    const auto [auc_mean, auc_std] = mean_std([](const FoldMetrics& f) { return f.auc; });
    if (auc_mean) {
        rep.mean.auc = auc_mean;
        rep.stddev.auc = auc_std;
    }

    std::set<int> classes;
    for (const auto& f : folds)
        for (const auto& [c, acc] : f.per_class_accuracy) classes.insert(c);
    for (int c : classes) {
        double s = 0.0, s2 = 0.0;
        std::size_t count = 0;
        for (const auto& f : folds) {
            auto it = f.per_class_accuracy.find(c);
            if (it != f.per_class_accuracy.end()) {
                s += it->second;
                s2 += it->second * it->second;
                ++count;
            }
        }
        const double mean = s / static_cast<double>(count);
        rep.mean.per_class_accuracy[c] = mean;
        rep.stddev.per_class_accuracy[c] =
            std::sqrt(std::max(0.0, s2 / static_cast<double>(count) - mean * mean));
    }
    return rep;
}

AnomalyAccuracy anomaly_accuracy(const std::vector<int>& y_true_multiclass, int normal_class,
                                 const std::vector<int>& y_pred_binary) {
    if (y_true_multiclass.empty() || y_true_multiclass.size() != y_pred_binary.size())
        throw ValidationError("anomaly_accuracy: empty input or length mismatch");
    std::map<int, std::pair<std::size_t, std::size_t>> counts;
    std::size_t normal_correct = 0, normal_total = 0, disease_correct = 0, disease_total = 0;
    for (std::size_t i = 0; i < y_true_multiclass.size(); ++i) {
        const int expected = y_true_multiclass[i] == normal_class ? 0 : 1;
        const bool correct = y_pred_binary[i] == expected;
        auto& [corr, tot] = counts[y_true_multiclass[i]];
        ++tot;
        if (correct) ++corr;
        if (expected == 0) {
            ++normal_total;
            if (correct) ++normal_correct;
        } else {
            ++disease_total;
            if (correct) ++disease_correct;
        }
    }
    AnomalyAccuracy out;
    double sum = 0.0;
    for (const auto& [c, ct] : counts) {
        out.per_class_accuracy[c] =
            static_cast<double>(ct.first) / static_cast<double>(ct.second);
        sum += out.per_class_accuracy[c];
    }
    out.unmerged_average = sum / static_cast<double>(counts.size());
    if (normal_total == 0 || disease_total == 0)
        throw ValidationError("anomaly_accuracy: need both normal and disease ground truth");
    out.merged_aca = 0.5 * (static_cast<double>(normal_correct) / static_cast<double>(normal_total) +
                            static_cast<double>(disease_correct) / static_cast<double>(disease_total));
    return out;
}

SynthDataset synth_dataset(std::size_t n_classes, std::size_t n_per_class,
                           std::size_t feature_dim, double class_separation, double noise,
                           std::uint64_t seed) {
    if (n_classes == 0 || n_per_class == 0 || feature_dim == 0)
        throw ConfigError("synth_dataset: all sizes must be positive");
    if (class_separation <= 0.0 || noise < 0.0)
        throw ConfigError("synth_dataset: separation must be > 0, noise >= 0");

    Rng rng = make_stream_rng(seed, 0x5D47A);
    SynthDataset out;
    out.class_centers = MatD(n_classes, feature_dim);
    out.class_text_features = MatD(n_classes, feature_dim);
    for (std::size_t c = 0; c < n_classes; ++c) {
        VecD dir(feature_dim);
        for (auto& x : dir) x = rng.normal();
        const double n = norm2(dir);
        for (std::size_t k = 0; k < feature_dim; ++k)
            out.class_centers(c, k) = class_separation * dir[k] / n;

        // Correlated-but-distinct unit direction standing in for the class
        // text: a fixed-angle mix of the center direction and a fresh one.
        VecD jitter(feature_dim);
        for (auto& x : jitter) x = rng.normal();
        const double jn = norm2(jitter);
        VecD text(feature_dim);
        for (std::size_t k = 0; k < feature_dim; ++k)
            text[k] = 0.7 * dir[k] / n + 0.3 * jitter[k] / jn;
        const double tn = norm2(text);
        for (std::size_t k = 0; k < feature_dim; ++k)
            out.class_text_features(c, k) = text[k] / tn;
    }

    out.image_features = MatD(n_classes * n_per_class, feature_dim);
    out.labels.resize(n_classes * n_per_class);
    std::size_t row = 0;
    for (std::size_t c = 0; c < n_classes; ++c)
        for (std::size_t s = 0; s < n_per_class; ++s, ++row) {
            out.labels[row] = static_cast<int>(c);
            for (std::size_t k = 0; k < feature_dim; ++k)
                out.image_features(row, k) = out.class_centers(c, k) + noise * rng.normal();
        }
    return out;
}

namespace {

FoldMetrics eval_probe_on(const LinearProbe& probe, const ModelState& model, const MatD& features,
                          const std::vector<int>& labels, const std::vector<std::size_t>& idx,
                          FeatureChoice choice) {
    std::vector<int> y_true, y_pred;
    for (std::size_t i : idx) {
        y_true.push_back(labels[i]);
        const VecD f = extract_features(model, features.row_copy(i), choice);
        y_pred.push_back(predict_linear_probe(probe, f).class_index);
    }
    return fold_metrics(y_true, y_pred, TaskKind::multiclass, 0);
}

FoldMetrics eval_zeroshot_on(const ModelState& model,
                             const std::vector<ClassPrototype>& prototypes, const MatD& features,
                             const std::vector<int>& labels, const std::vector<std::size_t>& idx) {
    std::vector<int> y_true, y_pred;
    for (std::size_t i : idx) {
        y_true.push_back(labels[i]);
        y_pred.push_back(
            static_cast<int>(predict(model, features.row_copy(i), prototypes).class_index));
    }
    return fold_metrics(y_true, y_pred, TaskKind::multiclass, 0);
}

}  // namespace

CrossDomainResult cross_domain_eval(const LabeledSet& a, const LabeledSet& b,
                                    const ModelState& model,
                                    const std::vector<ClassPrototype>& prototypes,
                                    const SplitPlan& plan, AdaptMethod method,
                                    FeatureChoice choice, const ProbeFitConfig& probe_cfg) {
    const std::set<std::string> va(a.class_names.begin(), a.class_names.end());
    const std::set<std::string> vb(b.class_names.begin(), b.class_names.end());
    if (va != vb) {
        std::string unshared;
        for (const auto& n : va)
            if (!vb.count(n)) unshared += (unshared.empty() ? "" : ", ") + n;
        for (const auto& n : vb)
            if (!va.count(n)) unshared += (unshared.empty() ? "" : ", ") + n;
        throw ValidationError("cross_domain_eval: unshared classes: " + unshared);
    }

    // Remap B's labels onto A's class indexing.
    std::map<std::string, int> a_index;
    for (std::size_t i = 0; i < a.class_names.size(); ++i)
        a_index[a.class_names[i]] = static_cast<int>(i);
    std::vector<int> b_labels(b.labels.size());
    for (std::size_t i = 0; i < b.labels.size(); ++i)
        b_labels[i] = a_index.at(b.class_names[static_cast<std::size_t>(b.labels[i])]);

    const Splits sa = make_splits(a.labels, plan);
    const Splits sb = make_splits(b_labels, plan);  // evaluation subset of B under the same plan

    std::vector<FoldMetrics> aa, ab, zsa, zsb;
    const FoldMetrics zs_on_a =
        eval_zeroshot_on(model, prototypes, a.features, a.labels, sa.test_indices);
    const FoldMetrics zs_on_b =
        eval_zeroshot_on(model, prototypes, b.features, b_labels, sb.test_indices);
    for (std::size_t f = 0; f < plan.folds; ++f) {
        if (method == AdaptMethod::linear_probe) {
            MatD support(sa.fold_support[f].size(), 0);
            std::vector<int> sup_labels;
            std::vector<VecD> rows;
            for (std::size_t i : sa.fold_support[f]) {
                rows.push_back(extract_features(model, a.features.row_copy(i), choice));
                sup_labels.push_back(a.labels[i]);
            }
            MatD sup(rows.size(), rows.empty() ? 0 : rows[0].size());
            for (std::size_t r = 0; r < rows.size(); ++r) sup.set_row(r, rows[r]);
            const auto fit =
                fit_linear_probe(sup, sup_labels, a.class_names.size(), probe_cfg, choice);
            aa.push_back(eval_probe_on(fit.probe, model, a.features, a.labels, sa.test_indices,
                                       choice));
            ab.push_back(
                eval_probe_on(fit.probe, model, b.features, b_labels, sb.test_indices, choice));
        } else {
            aa.push_back(zs_on_a);
            ab.push_back(zs_on_b);
        }
        zsa.push_back(zs_on_a);
        zsb.push_back(zs_on_b);
    }

    CrossDomainResult out;
    out.fit_to_fit = aggregate_folds(aa);
    out.fit_to_other = aggregate_folds(ab);
    out.zs_fit = aggregate_folds(zsa);
    out.zs_other = aggregate_folds(zsb);
    return out;
}

std::map<FeatureChoice, EvalReport> feature_ablation(const ModelState& model,
                                                     const MatD& vision_features,
                                                     const std::vector<int>& labels,
                                                     std::size_t n_classes,
                                                     const SplitPlan& plan,
                                                     const ProbeFitConfig& probe_cfg) {
    const Splits splits = make_splits(labels, plan);
    std::map<FeatureChoice, EvalReport> out;
    for (FeatureChoice choice : {FeatureChoice::vision, FeatureChoice::projected,
                                 FeatureChoice::projected_normalized}) {
        std::vector<FoldMetrics> folds;
        for (const auto& support : splits.fold_support) {
            std::vector<VecD> rows;
            std::vector<int> sup_labels;
            for (std::size_t i : support) {
                rows.push_back(extract_features(model, vision_features.row_copy(i), choice));
                sup_labels.push_back(labels[i]);
            }
            MatD sup(rows.size(), rows.empty() ? 0 : rows[0].size());
            for (std::size_t r = 0; r < rows.size(); ++r) sup.set_row(r, rows[r]);
            const auto fit = fit_linear_probe(sup, sup_labels, n_classes, probe_cfg, choice);
            folds.push_back(eval_probe_on(fit.probe, model, vision_features, labels,
                                          splits.test_indices, choice));
        }
        out.emplace(choice, aggregate_folds(folds));
    }
    return out;
}

}  // namespace palign
