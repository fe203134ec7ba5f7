#include <gtest/gtest.h>

#include <set>

#include "brainstr/segfc.hpp"
#include "brainstr/synthgen.hpp"

using namespace brainstr;

namespace {

// Mean correlation over the block pairs inside phases of the given states.
double block_correlation(const BoldRecording& r, const SynthConfig& cfg) {
    double sum = 0.0;
    int n = 0;
    const auto& b = *r.true_boundaries;
    for (std::size_t p = 0; p + 1 < b.size(); ++p) {
        const int s = r.phase_states[p];
        if (std::find(cfg.discriminative_states.begin(), cfg.discriminative_states.end(), s) ==
            cfg.discriminative_states.end())
            continue;
        const Matrix fc = pearson_fc(r.signal.middleRows(b[p], b[p + 1] - b[p]));
        for (const auto& e : cfg.discriminative_block) {
            sum += fc(e.i, e.j);
            ++n;
        }
    }
    return sum / n;
}

} // namespace

TEST(Synthgen, ControlSubjectHasPhasesAndNoEdges) {
    SynthConfig cfg;
    Rng rng(1);
    const BoldRecording r = generate_subject(cfg, 0, rng);
    EXPECT_EQ(r.signal.rows(), 400);
    EXPECT_EQ(r.signal.cols(), 16);
    ASSERT_TRUE(r.true_boundaries.has_value());
    EXPECT_GE(r.true_boundaries->size(), 4u);
    ASSERT_TRUE(r.true_edges.has_value());
    EXPECT_TRUE(r.true_edges->empty());
    EXPECT_TRUE(r.signal.allFinite());
}

TEST(Synthgen, PatientSubjectPlantsTheBlock) {
    SynthConfig cfg;
    Rng rng(1);
    const BoldRecording r = generate_subject(cfg, 1, rng);
    ASSERT_TRUE(r.true_edges.has_value());
    ASSERT_EQ(r.true_edges->size(), cfg.discriminative_block.size());
    std::set<RoiPair> want(cfg.discriminative_block.begin(), cfg.discriminative_block.end());
    std::set<RoiPair> got(r.true_edges->begin(), r.true_edges->end());
    EXPECT_EQ(want, got);
}

TEST(Synthgen, SameSeedGivesIdenticalBits) {
    SynthConfig cfg;
    const auto a = generate_dataset(cfg, 3);
    const auto b = generate_dataset(cfg, 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].signal, b[i].signal);
        EXPECT_EQ(*a[i].true_boundaries, *b[i].true_boundaries);
    }
    cfg.seed = 8;
    const auto c = generate_dataset(cfg, 3);
    EXPECT_NE(a[0].signal, c[0].signal);
}

TEST(Synthgen, DatasetCountsAndUniqueIds) {
    SynthConfig cfg;
    cfg.n_timepoints = 300;
    const auto d = generate_dataset(cfg, 25);
    ASSERT_EQ(d.size(), 50u);
    int ones = 0;
    std::set<std::string> ids;
    for (const auto& r : d) {
        ones += r.label;
        ids.insert(r.subject_id);
    }
    EXPECT_EQ(ones, 25);
    EXPECT_EQ(ids.size(), 50u);
}

TEST(Synthgen, PhasePlanRespectsLengthsAndVisitsEveryState) {
    SynthConfig cfg;
    for (std::uint64_t s = 0; s < 50; ++s) {
        Rng rng(s);
        const PhasePlan p = sample_phase_plan(cfg, rng);
        ASSERT_EQ(p.boundaries.front(), 0);
        ASSERT_EQ(p.boundaries.back(), cfg.n_timepoints);
        for (std::size_t k = 0; k + 1 < p.boundaries.size(); ++k) {
            EXPECT_GE(p.boundaries[k + 1] - p.boundaries[k], cfg.min_phase_len);
            if (k + 2 < p.boundaries.size()) {
                EXPECT_LE(p.boundaries[k + 1] - p.boundaries[k], 2 * cfg.min_phase_len);
            }
            if (k > 0) {
                EXPECT_NE(p.states[k], p.states[k - 1]);
            }
        }
        EXPECT_EQ(std::set<int>(p.states.begin(), p.states.end()).size(), static_cast<std::size_t>(cfg.n_states));
    }
}

TEST(Synthgen, TemplatesArePositiveDefiniteAndUnitDiagonalBeforeRepair) {
    SynthConfig cfg;
    for (const Matrix& c : state_templates(cfg)) {
        EXPECT_TRUE(c.isApprox(c.transpose()));
        Eigen::SelfAdjointEigenSolver<Matrix> es(c);
        EXPECT_GT(es.eigenvalues().minCoeff(), 1e-6);
    }
    const Matrix raised = inject_effect(state_templates(cfg)[0], cfg.discriminative_block, 0.5);
    Eigen::SelfAdjointEigenSolver<Matrix> es(raised);
    EXPECT_GT(es.eigenvalues().minCoeff(), 1e-6);
}

TEST(Synthgen, PlantedCorrelationGapExceedsHalfTheEffect) {
    SynthConfig cfg;
    const auto d = generate_dataset(cfg, 25);
    double c0 = 0.0, c1 = 0.0;
    for (const auto& r : d) (r.label == 1 ? c1 : c0) += block_correlation(r, cfg);
    c0 /= 25.0;
    c1 /= 25.0;
    EXPECT_GE(c1 - c0, cfg.effect_size / 2.0);
}

TEST(Synthgen, SignalsAreZScoredPerRoi) {
    SynthConfig cfg;
    Rng rng(2);
    const BoldRecording r = generate_subject(cfg, 1, rng);
    for (Index k = 0; k < r.signal.cols(); ++k) {
        EXPECT_NEAR(r.signal.col(k).mean(), 0.0, 1e-12);
        EXPECT_NEAR(r.signal.col(k).squaredNorm() / r.signal.rows(), 1.0, 1e-12);
    }
}

TEST(Synthgen, InvalidConfigsAreRejected) {
    SynthConfig cfg;
    cfg.n_states = 6; // 6 * 80 > 400
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = SynthConfig{};
    cfg.discriminative_block = {{2, 2}};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = SynthConfig{};
    cfg.discriminative_block = {{0, 16}};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = SynthConfig{};
    cfg.effect_size = 1.5;
    EXPECT_THROW(cfg.validate(), ConfigError);
}
