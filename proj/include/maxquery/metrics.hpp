#pragma once
// Ranking metrics for OOD localization/detection and overlap metrics for
// inlier segmentation. Ranking metrics are computed from a table of distinct
// score values (descending) with integer positive/negative counts, which is
// what the mergeable accumulator produces; merge order therefore cannot
// change any result.

#include "maxquery/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace maxquery::metrics {

/// Flat (score, label) arrays; label 1 = OOD voxel.
struct ScoredPixels {
    std::vector<Real> scores;
    std::vector<std::uint8_t> labels;
};

struct ThresholdTable {
    std::vector<Real> values;  // distinct scores, descending
    std::vector<std::int64_t> pos;
    std::vector<std::int64_t> neg;
    std::int64_t total_pos = 0;
    std::int64_t total_neg = 0;
};

class ScoreAccumulator {
public:
    void add(Real score, bool positive) {
        require(!std::isnan(score), ErrorCategory::Numeric, "NaN anomaly score");
        items_.emplace_back(score, positive ? 1 : 0);
    }
    void add(std::span<const Real> scores, std::span<const std::uint8_t> labels) {
        require(scores.size() == labels.size(), ErrorCategory::Shape, "scores/labels length mismatch");
        items_.reserve(items_.size() + scores.size());
        for (std::size_t i = 0; i < scores.size(); ++i) add(scores[i], labels[i] != 0);
    }
    void merge(const ScoreAccumulator& other) { items_.insert(items_.end(), other.items_.begin(), other.items_.end()); }
    std::size_t size() const { return items_.size(); }

    ThresholdTable table() const {
        auto sorted = items_;
        std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        ThresholdTable t;
        for (std::size_t i = 0; i < sorted.size();) {
            std::size_t j = i;
            std::int64_t p = 0, n = 0;
            while (j < sorted.size() && sorted[j].first == sorted[i].first) {
                (sorted[j].second ? p : n) += 1;
                ++j;
            }
            t.values.push_back(sorted[i].first);
            t.pos.push_back(p);
            t.neg.push_back(n);
            t.total_pos += p;
            t.total_neg += n;
            i = j;
        }
        return t;
    }

private:
    std::vector<std::pair<Real, std::uint8_t>> items_;
};

inline ThresholdTable make_table(const ScoredPixels& sp) {
    ScoreAccumulator acc;
    acc.add(sp.scores, sp.labels);
    return acc.table();
}

inline void require_both_classes(const ThresholdTable& t) {
    require(t.total_pos > 0 && t.total_neg > 0, ErrorCategory::Data,
            "ranking metric undefined: labels contain a single class");
}

/// P(score_pos > score_neg) + 0.5 P(tie).
inline Real auroc(const ThresholdTable& t) {
    require_both_classes(t);
    std::int64_t twice_u = 0;
    std::int64_t neg_above = 0;
    for (std::size_t i = 0; i < t.values.size(); ++i) {
        const std::int64_t neg_below = t.total_neg - neg_above - t.neg[i];
        twice_u += t.pos[i] * (2 * neg_below + t.neg[i]);
        neg_above += t.neg[i];
    }
    return static_cast<Real>(twice_u) / (2.0 * static_cast<Real>(t.total_pos) * static_cast<Real>(t.total_neg));
}

/// Step-wise average precision: sum over distinct thresholds (descending) of
/// (recall_k - recall_{k-1}) * precision_k.
inline Real aupr(const ThresholdTable& t) {
    require_both_classes(t);
    std::int64_t tp = 0, fp = 0;
    Real prev_recall = 0.0, area = 0.0;
    for (std::size_t i = 0; i < t.values.size(); ++i) {
        tp += t.pos[i];
        fp += t.neg[i];
        const Real recall = static_cast<Real>(tp) / static_cast<Real>(t.total_pos);
        const Real precision = static_cast<Real>(tp) / static_cast<Real>(tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return area;
}

/// FPR at the largest threshold whose TPR reaches `tpr_level`; no
/// interpolation between thresholds.
inline Real fpr_at_tpr(const ThresholdTable& t, Real tpr_level = 0.95) {
    require_both_classes(t);
    std::int64_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < t.values.size(); ++i) {
        tp += t.pos[i];
        fp += t.neg[i];
        if (static_cast<Real>(tp) / static_cast<Real>(t.total_pos) >= tpr_level)
            return static_cast<Real>(fp) / static_cast<Real>(t.total_neg);
    }
    return 1.0;
}

inline Real auroc(const ScoredPixels& sp) { return auroc(make_table(sp)); }
inline Real aupr(const ScoredPixels& sp) { return aupr(make_table(sp)); }
inline Real fpr_at_tpr(const ScoredPixels& sp, Real tpr_level = 0.95) { return fpr_at_tpr(make_table(sp), tpr_level); }

struct CaseScore {
    Real score = 0.0;
    bool is_ood_case = false;
};

/// AUROC over case-level anomaly scores.
inline Real case_auc(std::span<const CaseScore> cases) {
    ScoreAccumulator acc;
    for (const auto& c : cases) acc.add(c.score, c.is_ood_case);
    return auroc(acc.table());
}

// ---------------------------------------------------------------------------
// Overlap

struct DiceCounts {
    std::int64_t intersection = 0;
    std::int64_t predicted = 0;
    std::int64_t truth = 0;

    DiceCounts& operator+=(const DiceCounts& o) {
        intersection += o.intersection;
        predicted += o.predicted;
        truth += o.truth;
        return *this;
    }
    /// 2|P n G| / (|P| + |G|); 1 when both masks are empty.
    Real value() const {
        if (predicted + truth == 0) return 1.0;
        return 2.0 * static_cast<Real>(intersection) / static_cast<Real>(predicted + truth);
    }
};

inline DiceCounts dice_counts(std::span<const int> predicted, std::span<const std::int32_t> truth, int class_id) {
    require(predicted.size() == truth.size(), ErrorCategory::Shape, "dice input length mismatch");
    DiceCounts c;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const bool p = predicted[i] == class_id;
        const bool g = truth[i] == class_id;
        c.intersection += p && g;
        c.predicted += p;
        c.truth += g;
    }
    return c;
}

inline Real dice(std::span<const int> predicted, std::span<const std::int32_t> truth, int class_id) {
    return dice_counts(predicted, truth, class_id).value();
}

/// Dice from a one-hot stack G (classes x voxels).
inline Real dice(std::span<const int> predicted, const Matrix& one_hot, int class_id) {
    require(class_id >= 0 && class_id < one_hot.rows(), ErrorCategory::Shape, "class id out of range");
    require(static_cast<Eigen::Index>(predicted.size()) == one_hot.cols(), ErrorCategory::Shape,
            "dice input length mismatch");
    DiceCounts c;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const bool p = predicted[i] == class_id;
        const bool g = one_hot(class_id, static_cast<Eigen::Index>(i)) != 0.0;
        c.intersection += p && g;
        c.predicted += p;
        c.truth += g;
    }
    return c.value();
}

// ---------------------------------------------------------------------------
// Report

struct MethodMetrics {
    Real auroc = 0.0;
    Real aupr = 0.0;
    Real fpr95 = 0.0;
    Real case_auc = 0.0;
};

struct EvalReport {
    std::map<std::string, MethodMetrics> methods;
    std::map<int, Real> dice_per_class;
    Real mean_inlier_dice = 0.0;
    std::string config_tag;
    std::string pooling = "pooled_over_all_test_voxels";
    std::int64_t ood_voxels = 0;
    std::int64_t inlier_voxels = 0;
    int inlier_cases = 0;
    int ood_cases = 0;
};

}  // namespace maxquery::metrics
