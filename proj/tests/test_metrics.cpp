#include "maxquery/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace maxquery;
using namespace maxquery::metrics;

namespace {

// Scores drawn from a small lattice so ties show up.
ScoredPixels random_pixels(Rng& rng, int n, bool ties) {
    ScoredPixels sp;
    for (int i = 0; i < n; ++i) {
        sp.scores.push_back(ties ? std::floor(rng.uniform(0.0, 20.0)) / 4.0 : rng.normal());
        sp.labels.push_back(static_cast<std::uint8_t>(rng.uniform() < 0.35));
    }
    if (std::count(sp.labels.begin(), sp.labels.end(), 1) == 0) sp.labels[0] = 1;
    if (std::count(sp.labels.begin(), sp.labels.end(), 0) == 0) sp.labels[0] = 0;
    return sp;
}

Real pairwise_auroc(const std::vector<Real>& s, const std::vector<std::uint8_t>& l) {
    std::int64_t twice = 0, p = 0, n = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (l[i]) ++p;
        else ++n;
        if (!l[i]) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (l[j]) continue;
            twice += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
        }
    }
    return static_cast<Real>(twice) / (2.0 * static_cast<Real>(p) * static_cast<Real>(n));
}

std::vector<Real> distinct_descending(std::vector<Real> s) {
    std::sort(s.begin(), s.end(), std::greater<>());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
}

// Counts at cutoff "score >= t" by a full scan.
std::pair<std::int64_t, std::int64_t> counts_at(const ScoredPixels& sp, Real t) {
    std::int64_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < sp.scores.size(); ++i)
        if (sp.scores[i] >= t) (sp.labels[i] ? tp : fp) += 1;
    return {tp, fp};
}

Real sweep_aupr(const ScoredPixels& sp) {
    const auto np = std::count(sp.labels.begin(), sp.labels.end(), 1);
    Real area = 0.0, prev = 0.0;
    for (Real t : distinct_descending(sp.scores)) {
        const auto [tp, fp] = counts_at(sp, t);
        const Real recall = static_cast<Real>(tp) / static_cast<Real>(np);
        area += (recall - prev) * static_cast<Real>(tp) / static_cast<Real>(tp + fp);
        prev = recall;
    }
    return area;
}

Real sweep_fpr(const ScoredPixels& sp, Real level) {
    const auto np = std::count(sp.labels.begin(), sp.labels.end(), 1);
    const auto nn = static_cast<std::int64_t>(sp.labels.size()) - np;
    for (Real t : distinct_descending(sp.scores)) {
        const auto [tp, fp] = counts_at(sp, t);
        if (static_cast<Real>(tp) / static_cast<Real>(np) >= level) return static_cast<Real>(fp) / static_cast<Real>(nn);
    }
    return 1.0;
}

}  // namespace

TEST(Auroc, FourPointExample) {
    const ScoredPixels sp{{0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}};
    EXPECT_DOUBLE_EQ(auroc(sp), 0.75);
}

TEST(Auroc, SeparatedAndAllTied) {
    EXPECT_EQ(auroc(ScoredPixels{{0.1, 0.2, 0.9, 1.0}, {0, 0, 1, 1}}), 1.0);
    EXPECT_EQ(auroc(ScoredPixels{{0.3, 0.3, 0.3, 0.3, 0.3}, {0, 1, 0, 1, 0}}), 0.5);
}

TEST(Auroc, SingleClassIsDataError) {
    try {
        auroc(ScoredPixels{{0.1, 0.2}, {1, 1}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.category(), ErrorCategory::Data);
    }
    EXPECT_THROW(aupr(ScoredPixels{{0.1, 0.2}, {0, 0}}), Error);
    EXPECT_THROW(fpr_at_tpr(ScoredPixels{{0.1, 0.2}, {0, 0}}), Error);
}

TEST(Auroc, MatchesPairwiseOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const auto sp = random_pixels(rng, rng.uniform_int(2, 1000), trial % 2 == 0);
        ASSERT_EQ(auroc(sp), pairwise_auroc(sp.scores, sp.labels)) << trial;
    }
}

TEST(Auroc, InvariantUnderIncreasingTransform) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        auto sp = random_pixels(rng, 500, false);
        const Real a = auroc(sp);
        for (auto& s : sp.scores) s = std::exp(0.25 * s);
        EXPECT_EQ(auroc(sp), a);
    }
}

// Either flip alone complements the AUROC; doing both gives it back.
TEST(Auroc, LabelFlipAndScoreNegation) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto sp = random_pixels(rng, 300, false);
        auto negated = sp, flipped = sp;
        for (auto& s : negated.scores) s = -s;
        for (auto& l : flipped.labels) l = static_cast<std::uint8_t>(1 - l);
        auto both = negated;
        both.labels = flipped.labels;
        EXPECT_NEAR(auroc(sp) + auroc(flipped), 1.0, 1e-12);
        EXPECT_NEAR(auroc(sp) + auroc(negated), 1.0, 1e-12);
        EXPECT_EQ(auroc(both), auroc(sp));
    }
}

TEST(Aupr, SeparatedAndConstant) {
    EXPECT_EQ(aupr(ScoredPixels{{0.1, 0.2, 0.9, 1.0}, {0, 0, 1, 1}}), 1.0);
    const ScoredPixels flat{{1, 1, 1, 1, 1, 1, 1, 1}, {1, 0, 0, 1, 0, 0, 0, 1}};
    EXPECT_DOUBLE_EQ(aupr(flat), 3.0 / 8.0);
}

TEST(Aupr, MatchesThresholdSweep) {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const auto sp = random_pixels(rng, rng.uniform_int(2, 1000), trial % 2 == 0);
        ASSERT_NEAR(aupr(sp), sweep_aupr(sp), 1e-9) << trial;
    }
}

TEST(Fpr95, SeparatedIsZero) { EXPECT_EQ(fpr_at_tpr(ScoredPixels{{0.1, 0.2, 0.9, 1.0}, {0, 0, 1, 1}}), 0.0); }

TEST(Fpr95, MatchesThresholdSweep) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const auto sp = random_pixels(rng, rng.uniform_int(2, 1000), trial % 2 == 0);
        ASSERT_EQ(fpr_at_tpr(sp), sweep_fpr(sp, 0.95)) << trial;
        ASSERT_EQ(fpr_at_tpr(sp, 0.5), sweep_fpr(sp, 0.5)) << trial;
    }
}

TEST(Fpr95, IndependentLabelsNearTpr) {
    Rng rng(6);
    ScoredPixels sp;
    for (int i = 0; i < 100000; ++i) {
        sp.scores.push_back(rng.uniform());
        sp.labels.push_back(static_cast<std::uint8_t>(rng.uniform() < 0.5));
    }
    EXPECT_NEAR(fpr_at_tpr(sp), 0.95, 0.02);
}

TEST(CaseAuc, Examples) {
    const std::vector<CaseScore> sep{{0.1, false}, {0.2, false}, {0.7, true}};
    EXPECT_EQ(case_auc(sep), 1.0);
    const std::vector<CaseScore> pair{{0.9, false}, {0.2, true}};
    EXPECT_EQ(case_auc(pair), 0.0);
}

TEST(CaseAuc, MatchesPairwiseOracle) {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<CaseScore> cases;
        std::vector<Real> s;
        std::vector<std::uint8_t> l;
        for (int i = 0; i < 50; ++i) {
            cases.push_back({rng.normal(), rng.uniform() < 0.4});
            s.push_back(cases.back().score);
            l.push_back(cases.back().is_ood_case);
        }
        cases[0].is_ood_case = true;
        l[0] = 1;
        cases[1].is_ood_case = false;
        l[1] = 0;
        ASSERT_NEAR(case_auc(cases), pairwise_auroc(s, l), 1e-12);
    }
}

TEST(Accumulator, ChunkedMergeEqualsSinglePass) {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const auto sp = random_pixels(rng, 900, true);
        std::vector<std::size_t> cuts{0, 900};
        for (int c = 0; c < 5; ++c) cuts.push_back(static_cast<std::size_t>(rng.uniform_int(0, 900)));
        std::sort(cuts.begin(), cuts.end());
        std::vector<ScoreAccumulator> parts(cuts.size() - 1);
        for (std::size_t p = 0; p + 1 < cuts.size(); ++p)
            for (std::size_t i = cuts[p]; i < cuts[p + 1]; ++i) parts[p].add(sp.scores[i], sp.labels[i] != 0);
        ScoreAccumulator merged;
        for (std::size_t p = parts.size(); p-- > 0;) merged.merge(parts[p]);
        const auto a = merged.table();
        const auto b = make_table(sp);
        EXPECT_EQ(a.values, b.values);
        EXPECT_EQ(a.pos, b.pos);
        EXPECT_EQ(a.neg, b.neg);
        EXPECT_EQ(auroc(a), auroc(b));
        EXPECT_EQ(aupr(a), aupr(b));
        EXPECT_EQ(fpr_at_tpr(a), fpr_at_tpr(b));
    }
}

TEST(Accumulator, RejectsNanAndLengthMismatch) {
    ScoreAccumulator acc;
    EXPECT_THROW(acc.add(std::nan(""), true), Error);
    const std::vector<Real> s{1.0, 2.0};
    const std::vector<std::uint8_t> l{1};
    EXPECT_THROW(acc.add(s, l), Error);
}

TEST(Dice, Examples) {
    const std::vector<int> p{0, 2, 2, 1};
    EXPECT_EQ(dice(p, std::vector<std::int32_t>{0, 2, 2, 1}, 2), 1.0);
    EXPECT_EQ(dice(p, std::vector<std::int32_t>{2, 0, 0, 1}, 2), 0.0);
    EXPECT_EQ(dice(p, std::vector<std::int32_t>{0, 2, 2, 1}, 4), 1.0);
    EXPECT_EQ(dice(p, std::vector<std::int32_t>{0, 0, 0, 1}, 2), 0.0);
}

TEST(Dice, MatchesSetCountOracleAndIsSymmetric) {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = rng.uniform_int(1, 200);
        std::vector<int> p;
        std::vector<std::int32_t> g;
        for (int i = 0; i < n; ++i) {
            p.push_back(rng.uniform_int(0, 3));
            g.push_back(rng.uniform_int(0, 3));
        }
        const int k = rng.uniform_int(0, 3);
        std::set<int> sp, sg, inter;
        for (int i = 0; i < n; ++i) {
            if (p[static_cast<std::size_t>(i)] == k) sp.insert(i);
            if (g[static_cast<std::size_t>(i)] == k) sg.insert(i);
        }
        std::set_intersection(sp.begin(), sp.end(), sg.begin(), sg.end(), std::inserter(inter, inter.begin()));
        const Real want = sp.empty() && sg.empty()
                              ? 1.0
                              : 2.0 * static_cast<Real>(inter.size()) / static_cast<Real>(sp.size() + sg.size());
        ASSERT_EQ(dice(p, g, k), want);
        const std::vector<int> g_as_pred(g.begin(), g.end());
        const std::vector<std::int32_t> p_as_truth(p.begin(), p.end());
        ASSERT_EQ(dice(g_as_pred, p_as_truth, k), want);

        Matrix one_hot = Matrix::Zero(4, n);
        for (int i = 0; i < n; ++i) one_hot(g[static_cast<std::size_t>(i)], i) = 1.0;
        ASSERT_EQ(dice(p, one_hot, k), want);

        std::vector<std::size_t> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = perm.size(); i > 1; --i)
            std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
        std::vector<int> pp;
        std::vector<std::int32_t> gp;
        for (auto i : perm) {
            pp.push_back(p[i]);
            gp.push_back(g[i]);
        }
        ASSERT_EQ(dice(pp, gp, k), want);
    }
}

TEST(Dice, PooledCountsAddUp) {
    const std::vector<int> p1{2, 2, 0}, p2{2, 0};
    const std::vector<std::int32_t> g1{2, 0, 0}, g2{2, 2};
    auto c = dice_counts(p1, g1, 2);
    c += dice_counts(p2, g2, 2);
    EXPECT_EQ(c.intersection, 2);
    EXPECT_EQ(c.predicted, 3);
    EXPECT_EQ(c.truth, 3);
    EXPECT_DOUBLE_EQ(c.value(), 4.0 / 6.0);
}

TEST(Dice, BadInputsRejected) {
    const std::vector<int> p{0, 1};
    EXPECT_THROW(dice(p, std::vector<std::int32_t>{0}, 0), Error);
    EXPECT_THROW(dice(p, Matrix::Zero(2, 2), 5), Error);
}
