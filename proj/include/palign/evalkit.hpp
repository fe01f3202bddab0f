#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "palign/adapters.hpp"
#include "palign/linalg.hpp"
#include "palign/rng.hpp"

namespace palign {

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct Regime {
    enum class Kind { shots, fraction } kind = Kind::shots;
    std::size_t shots = 1;     // k per class
    double fraction = 0.2;     // stratified share of the train pool

    static Regime k_shot(std::size_t k) { return {Kind::shots, k, 0.0}; }
    static Regime of_fraction(double p) { return {Kind::fraction, 0, p}; }
};

struct SplitPlan {
    double test_fraction = 0.20;
    Regime regime = Regime::k_shot(1);
    std::size_t folds = 5;
    std::uint64_t seed = 0;
};

struct Splits {
    std::vector<std::size_t> test_indices;            // fixed across folds and regimes
    std::vector<std::vector<std::size_t>> fold_support;  // per fold, disjoint from test
};

/// Stratified fixed test split plus per-fold support draws from the remaining
/// pool. The test set depends only on (labels, test_fraction, seed), so it is
/// identical across regimes; fold f draws from the stream (seed, f).
/// Throws ValidationError naming any class with fewer than k pool samples.
Splits make_splits(const std::vector<int>& labels, const SplitPlan& plan);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Balanced per-class accuracy: unweighted mean over observed true classes.
double metric_aca(const std::vector<int>& y_true, const std::vector<int>& y_pred);

std::map<int, double> per_class_accuracy(const std::vector<int>& y_true,
                                         const std::vector<int>& y_pred);

/// Quadratically weighted Cohen kappa over grades {0..n_grades-1}.
double metric_quadratic_kappa(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                              std::size_t n_grades);

/// Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie). Both classes required.
double metric_auc(const std::vector<int>& y_true, const VecD& scores);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct FoldMetrics {
    std::map<int, double> per_class_accuracy;
    double aca = 0.0;
    std::optional<double> quadratic_kappa;
    std::optional<double> auc;
};

struct EvalReport {
    FoldMetrics mean;                 // arithmetic mean of the per-fold metrics
    FoldMetrics stddev;               // population stddev across folds
    std::vector<FoldMetrics> per_fold;
};

enum class TaskKind { multiclass, ordinal, binary };

TaskKind parse_task_kind(const std::string& s);

/// Metrics for one fold. ordinal adds quadratic kappa; binary adds AUC using
/// scores as the positive-class score.
FoldMetrics fold_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                         TaskKind task, std::size_t n_classes, const VecD* scores = nullptr);

EvalReport aggregate_folds(const std::vector<FoldMetrics>& folds);

/// Binary anomaly accuracies against multi-class ground truth: every
/// non-normal label counts as "disease". Reports both the merged two-class
/// balanced accuracy and the unmerged per-original-class average.
struct AnomalyAccuracy {
    std::map<int, double> per_class_accuracy;  // original classes
    double merged_aca = 0.0;
    double unmerged_average = 0.0;
};

AnomalyAccuracy anomaly_accuracy(const std::vector<int>& y_true_multiclass, int normal_class,
                                 const std::vector<int>& y_pred_binary);

// ---------------------------------------------------------------------------
// Synthetic data and harnesses
// ---------------------------------------------------------------------------

struct SynthDataset {
    MatD image_features;          // (n_classes * n_per_class) x feature_dim
    std::vector<int> labels;
    MatD class_text_features;     // n_classes x feature_dim, unit rows
    MatD class_centers;           // n_classes x feature_dim
};

/// Gaussian class clusters plus one correlated-but-distinct unit direction per
/// class standing in for its text representation.
SynthDataset synth_dataset(std::size_t n_classes, std::size_t n_per_class,
                           std::size_t feature_dim, double class_separation, double noise,
                           std::uint64_t seed);

// ---------------------------------------------------------------------------
// Cross-domain evaluation
// ---------------------------------------------------------------------------

struct LabeledSet {
    MatD features;                      // raw vision features
    std::vector<int> labels;            // local ids, 0..n_classes-1
    std::vector<std::string> class_names;
};

enum class AdaptMethod { zero_shot, linear_probe };

struct CrossDomainResult {
    EvalReport fit_to_fit;    // fitted on A, tested on A's test split
    EvalReport fit_to_other;  // fitted on A, tested on B
    EvalReport zs_fit;        // zero-shot reference on A's test split
    EvalReport zs_other;      // zero-shot reference on B
};

/// Fits on A per the split plan and evaluates each fold on A's test split and
/// on B's test split under the same plan (so A == B yields identical reports);
/// zero-shot rows are included as the no-adaptation reference. Throws
/// ValidationError listing unshared classes.
CrossDomainResult cross_domain_eval(const LabeledSet& a, const LabeledSet& b,
                                    const ModelState& model,
                                    const std::vector<ClassPrototype>& prototypes,
                                    const SplitPlan& plan, AdaptMethod method,
                                    FeatureChoice choice, const ProbeFitConfig& probe_cfg);

/// Fits and evaluates a linear probe on each of the three feature variants
/// from one frozen model; one result set per variant, shared splits.
std::map<FeatureChoice, EvalReport> feature_ablation(const ModelState& model,
                                                     const MatD& vision_features,
                                                     const std::vector<int>& labels,
                                                     std::size_t n_classes,
                                                     const SplitPlan& plan,
                                                     const ProbeFitConfig& probe_cfg);

}  // namespace palign
