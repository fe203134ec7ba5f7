#pragma once

// Two-stage training (APP pretraining, then the end-to-end classifier stack),
// stratified cross-validation with inner tau_c selection, and metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "app.hpp"
#include "autodiff.hpp"
#include "errors.hpp"
#include "log.hpp"
#include "model.hpp"
#include "nn.hpp"
#include "segfc.hpp"
#include "synthgen.hpp"

namespace brainstr {

struct TrainConfig {
    int app_epochs = 100;
    int main_epochs = 150;
    double learning_rate = 1e-3;
    int batch_size = 8;
    std::uint64_t seed = 0;
    int folds = 5;
    std::vector<double> tau_c_grid = {0.01, 0.05, 0.1, 0.5};
    double inner_val_fraction = 0.2;
    double clip_norm = 5.0;
    int min_fc_len = kDefaultMinFcLen;

    AppArchitecture app;                 // app.n_rois is overwritten from the data
    int app_batch_size = 8;
    int app_segments_per_subject = 64;
    int segment_step = 1;
    AppLossWeights app_weights;
    ModelConfig model;                   // N is overwritten from the data
    StructRegWeights reg;
    ContrastConfig contrast;

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
        if (app_epochs < 0 || main_epochs < 0) fail("epochs must be >= 0");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
        if (batch_size < 2) fail("batch_size must be >= 2");
        if (folds < 2) fail("folds must be >= 2");
        if (tau_c_grid.empty()) fail("tau_c_grid must not be empty");
        for (double t : tau_c_grid)
            if (!(t > 0.0)) fail("tau_c_grid entries must be > 0");
        if (!(inner_val_fraction > 0.0 && inner_val_fraction < 1.0)) fail("inner_val_fraction must lie in (0, 1)");
        if (!(clip_norm >= 0.0)) fail("clip_norm must be >= 0");
        if (min_fc_len < 2) fail("min_fc_len must be >= 2");
        if (app_batch_size < 1) fail("app_batch_size must be >= 1");
        if (app_segments_per_subject < 0 || app_segments_per_subject == 1) fail("app_segments_per_subject must be 0 or >= 2");
        if (segment_step < 1) fail("segment_step must be >= 1");
        app_weights.validate();
        reg.validate();
        contrast.validate();
    }

    AdamConfig adam() const {
        AdamConfig a;
        a.learning_rate = learning_rate;
        a.clip_norm = clip_norm;
        return a;
    }
};

// ---------------------------------------------------------------- metrics

struct Metrics {
    double accuracy = 0.0;
    double auc = 0.0;
    // confusion[true][predicted]
    std::array<std::array<int, 2>, 2> confusion{};
};

// Area under the ROC curve by the Mann-Whitney rank statistic, ties 1/2.
inline double auc_score(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw DimensionError("auc: score/label count mismatch");
    double wins = 0.0;
    long pos = 0, neg = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? pos : neg) += 1;
    if (pos == 0 || neg == 0) throw MetricError("auc: undefined with a single class present");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < labels.size(); ++j) {
            if (labels[j] == 1) continue;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

// Accuracy at threshold 0.5 (score > 0.5 predicts class 1) and rank AUC.
inline Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty()) throw DimensionError("compute_metrics: bad input sizes");
    Metrics m;
    int correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!(scores[i] >= 0.0 && scores[i] <= 1.0)) throw DimensionError("compute_metrics: scores must lie in [0, 1]");
        if (labels[i] != 0 && labels[i] != 1) throw DimensionError("compute_metrics: labels must be 0 or 1");
        const int pred = scores[i] > 0.5 ? 1 : 0;
        correct += pred == labels[i] ? 1 : 0;
        ++m.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(pred)];
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(scores.size());
    m.auc = auc_score(scores, labels);
    return m;
}

// ---------------------------------------------------------------- splits

// Per class, shuffled indices dealt round-robin into k folds.
inline std::vector<std::vector<std::size_t>> stratified_folds(const std::vector<int>& labels, int k, std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    for (const auto& [c, idx] : by_class)
        if (static_cast<int>(idx.size()) < k)
            throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                              " subjects, fewer than folds=" + std::to_string(k));
    Rng rng(synth_detail::splitmix64(seed ^ 0xF01DULL));
    std::vector<std::vector<std::size_t>> folds(static_cast<std::size_t>(k));
    for (auto& [c, idx] : by_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t i = 0; i < idx.size(); ++i) folds[i % static_cast<std::size_t>(k)].push_back(idx[i]);
    }
    for (auto& f : folds) std::sort(f.begin(), f.end());
    return folds;
}

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

// Stratified holdout: round(fraction * class size) per class (at least one
// when the class has two or more members) goes to validation.
inline Split stratified_split(const std::vector<std::size_t>& idx, const std::vector<int>& labels, double fraction,
                              std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i : idx) by_class[labels[i]].push_back(i);
    Rng rng(synth_detail::splitmix64(seed ^ 0x5B117ULL));
    Split s;
    for (auto& [c, members] : by_class) {
        std::shuffle(members.begin(), members.end(), rng);
        std::size_t nval = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(members.size())));
        if (members.size() >= 2) nval = std::clamp<std::size_t>(nval, 1, members.size() - 1);
        else nval = 0;
        for (std::size_t i = 0; i < members.size(); ++i) (i < nval ? s.validation : s.train).push_back(members[i]);
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.validation.begin(), s.validation.end());
    return s;
}

// ---------------------------------------------------------------- stage 1

inline PretrainConfig app_pretrain_config(const TrainConfig& cfg, std::uint64_t seed) {
    PretrainConfig pc;
    pc.epochs = cfg.app_epochs;
    pc.batch_size = cfg.app_batch_size;
    pc.segments_per_subject = cfg.app_segments_per_subject;
    pc.step = cfg.segment_step;
    pc.weights = cfg.app_weights;
    pc.adam = cfg.adam();
    pc.seed = seed;
    return pc;
}

inline AppArchitecture app_architecture(const TrainConfig& cfg, Index n_rois) {
    AppArchitecture a = cfg.app;
    a.n_rois = static_cast<int>(n_rois);
    return a;
}

struct AppStage {
    AppModel model;
    PretrainResult curves;
};

inline AppStage train_app(const std::vector<const Matrix*>& signals, const TrainConfig& cfg, std::uint64_t seed) {
    if (signals.empty()) throw ConfigError("train_app: no subjects");
    AppStage s{AppModel(app_architecture(cfg, signals.front()->cols()), synth_detail::splitmix64(seed ^ 0xA2ULL)), {}};
    s.curves = pretrain_app(s.model, signals, app_pretrain_config(cfg, seed));
    return s;
}

// Boundaries from the APP state code, then phase-wise FC.
inline PhasePartition partition_from_latents(const SegmentLatents& lat, const Matrix& signal, double tau_c,
                                             const TrainConfig& cfg, Index window) {
    ChangepointConfig cp{tau_c, cfg.min_fc_len};
    std::vector<int> b = detect_changepoints(lat.state, cp, window, cfg.segment_step, signal.rows());
    return build_partition(signal, b, cfg.min_fc_len);
}

// ---------------------------------------------------------------- stage 2

struct MainCurves {
    std::vector<std::string> terms = {"total", "ce", "ref", "usl", "str", "bin", "ms", "sp"};
    std::vector<std::vector<double>> values; // epoch x term, per-epoch batch means
};

struct MainStage {
    BrainStrModel model;
    MainCurves curves;
    double initial_train_ce = 0.0;
    double final_train_ce = 0.0;
};

// Frozen-model mean cross-entropy over a set of partitions.
inline double dataset_cross_entropy(const BrainStrModel& model, const std::vector<const PhasePartition*>& parts,
                                    const std::vector<int>& labels) {
    double total = 0.0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        ad::Tape t;
        BatchPass p = forward_batch(t, model, {parts[i]});
        total += ad::cross_entropy(p.logits, {labels[i]}).scalar();
    }
    return total / static_cast<double>(parts.size());
}

// Batches of batch_size; a trailing singleton joins the previous batch so
// every batch has a same-label-capable pair.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t bs) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t b = 0; b < n; b += bs) out.emplace_back(b, std::min(n, b + bs));
    if (out.size() >= 2 && out.back().second - out.back().first == 1) {
        out[out.size() - 2].second = out.back().second;
        out.pop_back();
    }
    return out;
}

inline MainStage train_main(const std::vector<const PhasePartition*>& parts, const std::vector<int>& labels,
                            const TrainConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (parts.empty() || parts.size() != labels.size()) throw ConfigError("train_main: bad training set");
    ModelConfig mc = cfg.model;
    mc.set_n_rois(static_cast<int>(parts.front()->n_rois()));
    MainStage s{BrainStrModel(mc, synth_detail::splitmix64(seed ^ 0x3A1ULL)), {}, 0.0, 0.0};
    s.initial_train_ce = dataset_cross_entropy(s.model, parts, labels);

    Adam opt(s.model.parameters(), cfg.adam());
    Rng rng(synth_detail::splitmix64(seed ^ 0xBA7CULL));
    std::vector<std::size_t> order(parts.size());
    std::iota(order.begin(), order.end(), 0);
    const auto ranges = batch_ranges(order.size(), static_cast<std::size_t>(cfg.batch_size));

    for (int epoch = 0; epoch < cfg.main_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<double> sums(s.curves.terms.size(), 0.0);
        for (const auto& [b0, b1] : ranges) {
            std::vector<const PhasePartition*> bp;
            std::vector<int> bl;
            for (std::size_t i = b0; i < b1; ++i) {
                bp.push_back(parts[order[i]]);
                bl.push_back(labels[order[i]]);
            }
            ad::Tape t;
            LossTerms L = batch_loss(t, s.model, bp, bl, cfg.contrast, cfg.reg);
            const double lv = L.total.scalar();
            if (!std::isfinite(lv))
                throw TrainingError("main training diverged at epoch " + std::to_string(epoch + 1) + " (non-finite loss)");
            opt.zero_grad();
            t.backward(L.total);
            opt.step();
            s.model.structgen.project_base();
            const double vals[] = {lv, L.ce.scalar(), L.ref.scalar(), L.usl.scalar(), L.str.scalar(),
                                   L.bin.scalar(), L.ms.scalar(), L.sp.scalar()};
            for (std::size_t k = 0; k < sums.size(); ++k) sums[k] += vals[k];
        }
        for (double& v : sums) v /= static_cast<double>(ranges.size());
        s.curves.values.push_back(sums);
    }
    s.final_train_ce = dataset_cross_entropy(s.model, parts, labels);
    return s;
}

// ---------------------------------------------------------------- cross-validation

struct FoldReport {
    int fold = 0;
    std::vector<std::string> train_ids;      // outer training set
    std::vector<std::string> inner_train_ids;
    std::vector<std::string> validation_ids;
    std::vector<std::string> test_ids;
    std::vector<double> tau_grid;
    std::vector<double> validation_accuracy; // per grid entry
    std::vector<double> validation_auc;      // per grid entry
    double selected_tau = 0.0;
    Metrics test;
    std::vector<double> test_scores;
    std::vector<int> test_labels;
    std::vector<int> test_phase_counts;
    double initial_train_ce = 0.0;
    double final_train_ce = 0.0;
    std::vector<double> app_loss_curve;
    MainCurves main_curves;
};

struct EvalReport {
    std::vector<FoldReport> folds;
    double mean_accuracy = 0.0, std_accuracy = 0.0;
    double mean_auc = 0.0, std_auc = 0.0;
    bool leakage_checks_passed = false;
};

// What a fold leaves behind for interpretability and reuse.
struct FoldArtifacts {
    AppModel app;
    BrainStrModel model;
    double tau_c = 0.0;
    std::vector<std::size_t> test_indices;
    std::vector<PhasePartition> test_partitions;
};

// APP stage outputs for one fold, reusable across runs that share the
// dataset, seed and APP settings (the loss-weight ablation, for instance).
struct FoldLatents {
    AppModel app;
    std::vector<double> app_loss_curve;
    std::vector<SegmentLatents> latents; // one per dataset subject
};

struct CvCache {
    std::map<int, FoldLatents> folds;
};

struct CvResult {
    EvalReport report;
    std::vector<FoldArtifacts> artifacts;
};

namespace trainer_detail {

inline double mean(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1); 0 for a single value.
inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::vector<std::string> ids(const std::vector<BoldRecording>& data, const std::vector<std::size_t>& idx) {
    std::vector<std::string> out;
    for (std::size_t i : idx) out.push_back(data[i].subject_id);
    return out;
}

inline void require_disjoint(const std::vector<std::string>& a, const std::vector<std::string>& b, const char* what) {
    std::set<std::string> sa(a.begin(), a.end());
    for (const auto& x : b)
        if (sa.count(x)) throw InternalError(std::string("fold leakage: subject ") + x + " appears in " + what);
}

} // namespace trainer_detail

// Per fold: inner 80/20 split of the training subjects, APP pretraining on the
// inner-train subjects, tau_c chosen by inner-validation accuracy (ties: higher
// validation AUC, then the larger tau_c), a fresh classifier stack trained on
// the whole outer training set with that tau_c, evaluation on the held-out fold.
inline CvResult run_cv(const std::vector<BoldRecording>& data, const TrainConfig& cfg, CvCache* cache = nullptr) {
    cfg.validate();
    if (data.empty()) throw ConfigError("run_cv: empty dataset");
    const Index n_rois = data.front().n_rois();
    std::vector<int> labels;
    std::set<std::string> seen;
    for (const auto& r : data) {
        if (r.n_rois() != n_rois) throw DimensionError("run_cv: subjects disagree on N");
        if (!seen.insert(r.subject_id).second) throw ConfigError("run_cv: duplicate subject_id " + r.subject_id);
        labels.push_back(r.label);
    }
    const auto folds = stratified_folds(labels, cfg.folds, cfg.seed);
    const Index window = cfg.app.window;

    CvResult result;
    std::vector<double> accs, aucs;
    for (int k = 0; k < cfg.folds; ++k) {
        const std::uint64_t fold_seed = synth_detail::splitmix64(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(k));
        FoldReport fr;
        fr.fold = k;
        const auto& test_idx = folds[static_cast<std::size_t>(k)];
        std::vector<std::size_t> train_idx;
        for (int j = 0; j < cfg.folds; ++j)
            if (j != k) train_idx.insert(train_idx.end(), folds[j].begin(), folds[j].end());
        std::sort(train_idx.begin(), train_idx.end());
        const Split inner = stratified_split(train_idx, labels, cfg.inner_val_fraction, fold_seed);

        fr.train_ids = trainer_detail::ids(data, train_idx);
        fr.inner_train_ids = trainer_detail::ids(data, inner.train);
        fr.validation_ids = trainer_detail::ids(data, inner.validation);
        fr.test_ids = trainer_detail::ids(data, test_idx);
        trainer_detail::require_disjoint(fr.train_ids, fr.test_ids, "both training and test sets");
        trainer_detail::require_disjoint(fr.inner_train_ids, fr.validation_ids, "both inner-train and validation sets");
        trainer_detail::require_disjoint(fr.validation_ids, fr.test_ids, "both validation and test sets");

        // Stage 1: APP on inner-train subjects only.
        FoldLatents local;
        FoldLatents* fl = &local;
        if (cache && cache->folds.count(k)) {
            fl = &cache->folds[k];
        } else {
            std::vector<const Matrix*> sigs;
            for (std::size_t i : inner.train) sigs.push_back(&data[i].signal);
            AppStage app = train_app(sigs, cfg, fold_seed);
            local.app = std::move(app.model);
            local.app_loss_curve = app.curves.loss_curve;
            for (const auto& r : data) local.latents.push_back(encode_signal(local.app, r.signal, cfg.segment_step));
            if (cache) fl = &(cache->folds[k] = std::move(local));
        }
        fr.app_loss_curve = fl->app_loss_curve;

        auto partitions = [&](const std::vector<std::size_t>& idx, double tau) {
            std::vector<PhasePartition> out;
            for (std::size_t i : idx) out.push_back(partition_from_latents(fl->latents[i], data[i].signal, tau, cfg, window));
            return out;
        };
        auto pointers = [](const std::vector<PhasePartition>& v) {
            std::vector<const PhasePartition*> out;
            for (const auto& p : v) out.push_back(&p);
            return out;
        };
        auto pick = [&](const std::vector<std::size_t>& idx) {
            std::vector<int> out;
            for (std::size_t i : idx) out.push_back(labels[i]);
            return out;
        };

        // tau_c selection sees inner-train (fit) and validation (score) subjects only.
        fr.tau_grid = cfg.tau_c_grid;
        std::size_t best = 0;
        for (std::size_t g = 0; g < cfg.tau_c_grid.size(); ++g) {
            const double tau = cfg.tau_c_grid[g];
            auto tr = partitions(inner.train, tau);
            auto va = partitions(inner.validation, tau);
            MainStage ms = train_main(pointers(tr), pick(inner.train), cfg, fold_seed ^ (0x7A0ULL + g));
            Metrics vm = compute_metrics(predict_scores(ms.model, pointers(va)), pick(inner.validation));
            fr.validation_accuracy.push_back(vm.accuracy);
            fr.validation_auc.push_back(vm.auc);
            const bool better =
                g == 0 || vm.accuracy > fr.validation_accuracy[best] ||
                (vm.accuracy == fr.validation_accuracy[best] &&
                 (vm.auc > fr.validation_auc[best] ||
                  (vm.auc == fr.validation_auc[best] && tau > cfg.tau_c_grid[best])));
            if (better) best = g;
        }
        fr.selected_tau = cfg.tau_c_grid[best];

        // Final classifier on the outer training set.
        auto tr = partitions(train_idx, fr.selected_tau);
        auto te = partitions(test_idx, fr.selected_tau);
        MainStage ms = train_main(pointers(tr), pick(train_idx), cfg, fold_seed);
        fr.initial_train_ce = ms.initial_train_ce;
        fr.final_train_ce = ms.final_train_ce;
        fr.main_curves = ms.curves;
        fr.test_scores = predict_scores(ms.model, pointers(te));
        fr.test_labels = pick(test_idx);
        for (const auto& p : te) fr.test_phase_counts.push_back(p.phase_count());
        fr.test = compute_metrics(fr.test_scores, fr.test_labels);
        accs.push_back(fr.test.accuracy);
        aucs.push_back(fr.test.auc);

        result.artifacts.push_back(FoldArtifacts{fl->app, std::move(ms.model), fr.selected_tau, test_idx, std::move(te)});
        result.report.folds.push_back(std::move(fr));
    }

    // every subject is tested exactly once
    std::multiset<std::string> tested;
    for (const auto& f : result.report.folds) tested.insert(f.test_ids.begin(), f.test_ids.end());
    if (tested.size() != data.size() || std::set<std::string>(tested.begin(), tested.end()).size() != data.size())
        throw InternalError("fold leakage: test folds do not partition the dataset");

    result.report.mean_accuracy = trainer_detail::mean(accs);
    result.report.std_accuracy = trainer_detail::sample_std(accs);
    result.report.mean_auc = trainer_detail::mean(aucs);
    result.report.std_auc = trainer_detail::sample_std(aucs);
    result.report.leakage_checks_passed = true;
    return result;
}

// Fit on every subject: APP on all signals, the classifier stack at a fixed tau_c.
struct FullFit {
    AppModel app;
    std::vector<double> app_loss_curve;
    BrainStrModel model;
    MainCurves main_curves;
    double tau_c = 0.0;
};

inline FullFit fit_full(const std::vector<BoldRecording>& data, const TrainConfig& cfg, double tau_c) {
    cfg.validate();
    if (data.empty()) throw ConfigError("fit_full: empty dataset");
    const std::uint64_t seed = synth_detail::splitmix64(cfg.seed ^ 0xF177ULL);
    std::vector<const Matrix*> sigs;
    for (const auto& r : data) sigs.push_back(&r.signal);
    AppStage app = train_app(sigs, cfg, seed);
    std::vector<PhasePartition> parts;
    std::vector<int> labels;
    for (const auto& r : data) {
        parts.push_back(partition_from_latents(encode_signal(app.model, r.signal, cfg.segment_step), r.signal, tau_c, cfg,
                                               cfg.app.window));
        labels.push_back(r.label);
    }
    std::vector<const PhasePartition*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    MainStage ms = train_main(ptrs, labels, cfg, seed);
    return FullFit{std::move(app.model), app.curves.loss_curve, std::move(ms.model), ms.curves, tau_c};
}

// Most frequently selected tau_c across folds (ties: the larger value).
inline double consensus_tau(const EvalReport& r) {
    std::map<double, int> count;
    for (const auto& f : r.folds) ++count[f.selected_tau];
    double best = 0.0;
    int n = -1;
    for (const auto& [tau, c] : count)
        if (c >= n) {
            best = tau;
            n = c;
        }
    return best;
}

} // namespace brainstr
