#include <gtest/gtest.h>

#include <set>

#include "brainstr/baseline.hpp"
#include "brainstr/gradcheck.hpp"
#include "brainstr/log.hpp"
#include "brainstr/trainer.hpp"
#include "test_util.hpp"

using namespace brainstr;

namespace {

// Small end-to-end configuration: N=6, T=160, short windows and few epochs.
SynthConfig tiny_synth() {
    SynthConfig s;
    s.n_rois = 6;
    s.n_timepoints = 160;
    s.min_phase_len = 40;
    s.effect_size = 0.6;
    return s;
}

TrainConfig tiny_train() {
    TrainConfig c;
    c.app_epochs = 2;
    c.main_epochs = 6;
    c.folds = 2;
    c.batch_size = 4;
    c.tau_c_grid = {0.1, 0.5};
    c.app.window = 10;
    c.app.hidden_channels = 4;
    c.app.dilations = {1, 2};
    c.app.latent_dim = 4;
    c.app.state_dim = 2;
    c.app_segments_per_subject = 16;
    c.model.structgen.hidden = 4;
    c.model.encoder.e2e_channels = 2;
    c.model.encoder.e2n_channels = 2;
    c.model.encoder.hidden = 6;
    c.model.encoder.embed_dim = 4;
    c.model.attention.embed_dim = 4;
    c.model.attention.hidden = 4;
    c.model.structgen.init_const = 0.55;
    c.seed = 3;
    return c;
}

} // namespace

TEST(Metrics, PerfectScores) {
    const Metrics m = compute_metrics({0.9, 0.9, 0.1, 0.1}, {1, 1, 0, 0});
    EXPECT_EQ(m.accuracy, 1.0);
    EXPECT_EQ(m.auc, 1.0);
    EXPECT_EQ(m.confusion[1][1], 2);
    EXPECT_EQ(m.confusion[0][0], 2);
}

TEST(Metrics, AllTiesGiveHalfAuc) {
    const Metrics m = compute_metrics({0.5, 0.5, 0.5}, {1, 0, 0});
    EXPECT_EQ(m.auc, 0.5);
    EXPECT_DOUBLE_EQ(m.accuracy, 2.0 / 3.0); // 0.5 is not > 0.5: everyone is called class 0
}

TEST(Metrics, HandEnumeratedPairs) {
    // positives 0.8, 0.7 each beat negatives 0.6, 0.2: 4 of 4 pairs
    const Metrics m = compute_metrics({0.8, 0.6, 0.7, 0.2}, {1, 0, 1, 0});
    EXPECT_EQ(m.auc, 1.0);
    EXPECT_EQ(m.accuracy, 0.75); // 0.6 > 0.5 is a false positive
    EXPECT_EQ(auc_score({0.3, 0.6, 0.6, 0.1}, {1, 0, 1, 0}), 0.625);
}

TEST(Metrics, SingleClassAucIsAnError) {
    EXPECT_THROW(auc_score({0.2, 0.8}, {1, 1}), MetricError);
    EXPECT_THROW(compute_metrics({0.2, 1.2}, {1, 0}), DimensionError);
}

TEST(Folds, EverySubjectIsTestedExactlyOnce) {
    std::vector<int> labels(50);
    for (int i = 25; i < 50; ++i) labels[i] = 1;
    const auto folds = stratified_folds(labels, 5, 9);
    std::multiset<std::size_t> seen;
    for (const auto& f : folds) {
        EXPECT_EQ(f.size(), 10u);
        int ones = 0;
        for (std::size_t i : f) ones += labels[i];
        EXPECT_EQ(ones, 5);
        seen.insert(f.begin(), f.end());
    }
    EXPECT_EQ(seen.size(), 50u);
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 50u);
    EXPECT_EQ(folds, stratified_folds(labels, 5, 9));
}

TEST(Folds, TooFewSubjectsPerClassIsAConfigError) {
    EXPECT_THROW(stratified_folds({0, 0, 0, 0, 0, 1, 1, 1, 1}, 5, 0), ConfigError);
}

TEST(Folds, InnerSplitIsStratifiedAndDisjoint) {
    std::vector<int> labels(40);
    for (int i = 20; i < 40; ++i) labels[i] = 1;
    std::vector<std::size_t> idx(40);
    std::iota(idx.begin(), idx.end(), 0);
    const Split s = stratified_split(idx, labels, 0.2, 4);
    EXPECT_EQ(s.validation.size(), 8u);
    EXPECT_EQ(s.train.size(), 32u);
    int ones = 0;
    for (std::size_t i : s.validation) ones += labels[i];
    EXPECT_EQ(ones, 4);
    for (std::size_t i : s.validation) EXPECT_FALSE(std::binary_search(s.train.begin(), s.train.end(), i));
}

TEST(Batches, TrailingSingletonJoinsThePreviousBatch) {
    EXPECT_EQ(batch_ranges(17, 8), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 8}, {8, 17}}));
    EXPECT_EQ(batch_ranges(16, 8), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 8}, {8, 16}}));
    EXPECT_EQ(batch_ranges(3, 8), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 3}}));
}

TEST(Config, InvalidTrainConfigsAreRejected) {
    TrainConfig c;
    c.batch_size = 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.folds = 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.tau_c_grid = {};
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.contrast.beta = 1.5;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Gradcheck, FreshMicroModelPassesEveryTerm) {
    const GradcheckReport r = gradcheck_suite();
    std::set<std::string> terms;
    for (const auto& e : r.entries) {
        terms.insert(e.term);
        if (!e.surrogate) {
            EXPECT_TRUE(e.passed) << e.term << " " << e.max_rel_error << " at " << e.worst_tensor;
        }
    }
    EXPECT_TRUE(r.all_passed());
    for (const char* t : {"recon", "smooth", "orth", "bin", "ms", "sp", "ref", "usl", "ce", "composed", "composed_ste"})
        EXPECT_TRUE(terms.count(t)) << t;
}

TEST(Gradcheck, CorruptedGradientIsFlagged) {
    for (const char* term : {"recon", "smooth", "orth", "bin", "ms", "sp", "ref", "usl", "ce", "composed"}) {
        GradcheckOptions o;
        o.corrupt_term = term;
        const GradcheckReport r = gradcheck_suite(o);
        EXPECT_FALSE(r.all_passed()) << term;
        for (const auto& e : r.entries) {
            if (e.surrogate) continue;
            EXPECT_EQ(e.passed, e.term != term) << e.term << " corrupting " << term;
        }
    }
}

TEST(Gradcheck, ReportIsDeterministic) {
    const GradcheckReport a = gradcheck_suite(), b = gradcheck_suite();
    ASSERT_EQ(a.entries.size(), b.entries.size());
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        EXPECT_EQ(a.entries[i].max_rel_error, b.entries[i].max_rel_error);
        EXPECT_EQ(a.entries[i].skipped_entries, b.entries[i].skipped_entries);
    }
}

TEST(CrossValidation, DeterministicLeakFreeAndLearning) {
    log::ScopedCapture quiet; // tiny batches often lack a same-label pair
    const auto data = generate_dataset(tiny_synth(), 4);
    const TrainConfig cfg = tiny_train();
    const CvResult a = run_cv(data, cfg);
    const CvResult b = run_cv(data, cfg);
    EXPECT_TRUE(a.report.leakage_checks_passed);
    ASSERT_EQ(a.report.folds.size(), 2u);
    std::multiset<std::string> tested;
    for (std::size_t k = 0; k < a.report.folds.size(); ++k) {
        const FoldReport& f = a.report.folds[k];
        const FoldReport& g = b.report.folds[k];
        EXPECT_EQ(f.test_scores, g.test_scores);
        EXPECT_EQ(f.selected_tau, g.selected_tau);
        EXPECT_EQ(f.validation_accuracy, g.validation_accuracy);
        tested.insert(f.test_ids.begin(), f.test_ids.end());
        std::set<std::string> train(f.train_ids.begin(), f.train_ids.end());
        for (const auto& id : f.test_ids) EXPECT_FALSE(train.count(id));
        std::set<std::string> inner(f.inner_train_ids.begin(), f.inner_train_ids.end());
        for (const auto& id : f.validation_ids) {
            EXPECT_FALSE(inner.count(id));
            EXPECT_TRUE(train.count(id)); // validation subjects come from the outer training set
        }
        EXPECT_EQ(f.inner_train_ids.size() + f.validation_ids.size(), f.train_ids.size());
        EXPECT_LT(f.final_train_ce, f.initial_train_ce);
        EXPECT_EQ(f.main_curves.values.size(), static_cast<std::size_t>(cfg.main_epochs));
        EXPECT_EQ(f.app_loss_curve.size(), static_cast<std::size_t>(cfg.app_epochs));
    }
    EXPECT_EQ(tested.size(), data.size());
    EXPECT_EQ(a.report.mean_accuracy, b.report.mean_accuracy);
    EXPECT_GE(a.report.std_accuracy, 0.0);
}

TEST(CrossValidation, CachedLatentsReproduceTheUncachedRun) {
    log::ScopedCapture quiet;
    const auto data = generate_dataset(tiny_synth(), 4);
    const TrainConfig cfg = tiny_train();
    CvCache cache;
    const CvResult first = run_cv(data, cfg, &cache);
    EXPECT_EQ(cache.folds.size(), 2u);
    const CvResult again = run_cv(data, cfg, &cache);
    const CvResult plain = run_cv(data, cfg);
    for (std::size_t k = 0; k < plain.report.folds.size(); ++k) {
        EXPECT_EQ(first.report.folds[k].test_scores, plain.report.folds[k].test_scores);
        EXPECT_EQ(again.report.folds[k].test_scores, plain.report.folds[k].test_scores);
    }
}

TEST(CrossValidation, DuplicateSubjectIdsAreRejected) {
    auto data = generate_dataset(tiny_synth(), 4);
    data[1].subject_id = data[0].subject_id;
    EXPECT_THROW(run_cv(data, tiny_train()), ConfigError);
}

TEST(FullFit, ConsensusTauPrefersTheCommonThenLargerValue) {
    EvalReport r;
    for (double t : {0.1, 0.5, 0.1, 0.5, 0.05}) {
        FoldReport f;
        f.selected_tau = t;
        r.folds.push_back(f);
    }
    EXPECT_EQ(consensus_tau(r), 0.5);
    r.folds.back().selected_tau = 0.1;
    EXPECT_EQ(consensus_tau(r), 0.1);
}

TEST(Baseline, LogisticRegressionSeparatesAnEasyProblem) {
    Matrix x(40, 2);
    std::vector<int> y;
    const Matrix noise = brainstr::testing::random_matrix(40, 2, 5, 0.3);
    for (Index i = 0; i < 40; ++i) {
        const int label = i % 2;
        x.row(i) << (label ? 1.0 : -1.0), 0.0;
        x.row(i) += noise.row(i);
        y.push_back(label);
    }
    const LogisticModel m = fit_logistic(x, y);
    int correct = 0;
    for (Index i = 0; i < 40; ++i) correct += (m.predict(x.row(i)) > 0.5) == (y[i] == 1);
    EXPECT_GE(correct, 38);
    EXPECT_GT(m.weight(0), 0.0);
}

TEST(Baseline, FeaturesAreTheUpperTriangle) {
    const Matrix s = brainstr::testing::random_matrix(50, 4, 6);
    const Matrix fc = pearson_fc(s);
    const RowVector f = static_fc_features(s);
    ASSERT_EQ(f.size(), 6);
    EXPECT_EQ(f(0), fc(0, 1));
    EXPECT_EQ(f(2), fc(0, 3));
    EXPECT_EQ(f(5), fc(2, 3));
}
