// brainstr command-line interface.
//
// Exit status: 0 success, 1 validation failure (bad config, schema, shapes,
// failed gradient check), 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "brainstr/brainstr.hpp"

namespace {

using namespace brainstr;

struct Options {
    std::string config;
    std::string data;
    std::string out;
    std::string checkpoint;
    std::string subnet_map;
    std::optional<std::uint64_t> seed;
    std::string corrupt;
};

RunConfig config_or_default(const Options& o) {
    RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
    return c;
}

void print_line(const std::string& s) { std::cout << s << '\n'; }

int cmd_synth(const Options& o) {
    RunConfig c = config_or_default(o);
    if (o.seed) c.synth.synth.seed = *o.seed;
    c.synth.synth.validate();
    const auto data = generate_dataset(c.synth.synth, c.synth.n_per_class);
    write_dataset(o.out, data);
    write_json(fs::path(o.out) / "synth_config.json", run_config_json(c)["synth"]);
    print_line("wrote " + std::to_string(data.size()) + " subjects to " + o.out);
    return 0;
}

int cmd_pretrain(const Options& o) {
    RunConfig c = config_or_default(o);
    if (o.seed) c.train.seed = *o.seed;
    const auto data = read_dataset(o.data);
    std::vector<const Matrix*> sigs;
    for (const auto& r : data) sigs.push_back(&r.signal);
    AppStage app = train_app(sigs, c.train, c.train.seed);
    write_json(fs::path(o.out) / "app.json", app_json(app.model, c.train.app_weights));
    write_text(fs::path(o.out) / "loss_app.csv", app_curves_csv(app.curves));
    print_line("final APP loss " + fmt9(app.curves.loss_curve.empty() ? 0.0 : app.curves.loss_curve.back()));
    return 0;
}

int cmd_train(const Options& o) {
    RunConfig c = config_or_default(o);
    if (o.seed) c.train.seed = *o.seed;
    c.train.validate();
    const auto data = read_dataset(o.data); // fails before any training on a bad manifest
    const fs::path out(o.out);
    write_json(out / "config.json", run_config_json(c));

    CvResult cv = run_cv(data, c.train);
    write_json(out / "eval_report.json", eval_report_json(cv.report));
    for (const auto& f : cv.report.folds) {
        const std::string k = std::to_string(f.fold);
        write_text(out / "curves" / ("loss_app_fold" + k + ".csv"), curves_csv({"total"}, [&] {
                       std::vector<std::vector<double>> v;
                       for (double x : f.app_loss_curve) v.push_back({x});
                       return v;
                   }()));
        write_text(out / "curves" / ("loss_main_fold" + k + ".csv"), curves_csv(f.main_curves.terms, f.main_curves.values));
    }

    const double tau = c.final_tau_c > 0.0 ? c.final_tau_c : consensus_tau(cv.report);
    FullFit fit = fit_full(data, c.train, tau);
    Checkpoint ck{fit.app, fit.model, tau, c.train.min_fc_len, c.train.segment_step};
    save_checkpoint(out / "checkpoint.json", ck);
    write_json(out / "app.json", app_json(fit.app, c.train.app_weights));
    write_json(out / "model.json", model_json(fit.model));
    write_text(out / "curves" / "loss_main_full.csv", curves_csv(fit.main_curves.terms, fit.main_curves.values));

    print_line("cv accuracy " + fmt9(cv.report.mean_accuracy) + " +- " + fmt9(cv.report.std_accuracy));
    print_line("cv auc " + fmt9(cv.report.mean_auc) + " +- " + fmt9(cv.report.std_auc));
    print_line("final tau_c " + fmt9(tau));
    return 0;
}

int cmd_eval(const Options& o) {
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const auto data = read_dataset(o.data);
    std::vector<PhasePartition> parts;
    std::vector<int> labels;
    for (const auto& r : data) {
        parts.push_back(partition_with(ck, r.signal));
        labels.push_back(r.label);
    }
    std::vector<const PhasePartition*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    const auto scores = predict_scores(ck.model, ptrs);
    Json subjects = Json::array();
    for (std::size_t i = 0; i < data.size(); ++i)
        subjects.push_back(Json{{"subject_id", data[i].subject_id},
                                {"label", labels[i]},
                                {"score", round9(scores[i])},
                                {"phases", parts[i].phase_count()}});
    Json j{{"format_version", kFormatVersion}, {"kind", "predictions"}, {"subjects", subjects}};
    bool both = false;
    for (int l : labels) both = both || l != labels.front();
    if (both) {
        const Metrics m = compute_metrics(scores, labels);
        j["metrics"] = metrics_json(m);
        print_line("accuracy " + fmt9(m.accuracy));
        print_line("auc " + fmt9(m.auc));
    } else {
        print_line("single-class dataset: AUC undefined, metrics omitted");
    }
    write_json(fs::path(o.out) / "predictions.json", j);
    return 0;
}

int cmd_explain(const Options& o) {
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const auto data = read_dataset(o.data);
    const Index n = ck.model.n_rois();
    if (!data.empty() && data.front().n_rois() != n)
        throw DimensionError("dataset has N=" + std::to_string(data.front().n_rois()) + ", checkpoint expects N=" +
                             std::to_string(n));
    const SubnetworkMap map = o.subnet_map.empty() ? whole_brain_map(n) : subnetwork_map_from_json(read_json(o.subnet_map), n, o.subnet_map);
    std::vector<InterpretabilityRecord> recs;
    for (const auto& r : data) recs.push_back(explain_subject(ck.model, partition_with(ck, r.signal), r.subject_id, r.label, map));
    const ExplainSummary s = export_explanations(o.out, recs);
    print_line("wrote " + std::to_string(recs.size()) + " records; group maps over " +
               std::to_string(s.all.important_subjects) + " subjects");
    return 0;
}

int cmd_gradcheck(const Options& o) {
    GradcheckOptions g;
    if (o.seed) g.seed = *o.seed;
    if (!o.corrupt.empty()) g.corrupt_term = o.corrupt;
    const GradcheckReport r = gradcheck_suite(g);
    for (const auto& e : r.entries) {
        const char* status = e.surrogate ? "SURROGATE" : (e.passed ? "PASS" : "FAIL");
        std::printf("%-13s max_rel_error %.9g (tol %.9g) worst %s skipped %ld %s\n", e.term.c_str(), e.max_rel_error,
                    e.tolerance, e.worst_tensor.c_str(), e.skipped_entries, status);
    }
    return r.all_passed() ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"brainstr: phase-wise brain-network structure learning"};
    app.require_subcommand(1);
    Options o;
    auto add_seed = [&](CLI::App* sub) {
        sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { o.seed = s; }, "override the seed");
    };

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--config", o.config, "run configuration (JSON)");
    synth->add_option("--out", o.out, "dataset directory")->required();
    add_seed(synth);

    auto* pretrain = app.add_subcommand("pretrain", "pretrain the phase-partition autoencoder on every subject");
    pretrain->add_option("--config", o.config, "run configuration (JSON)");
    pretrain->add_option("--data", o.data, "dataset directory")->required();
    pretrain->add_option("--out", o.out, "output directory")->required();
    add_seed(pretrain);

    auto* train = app.add_subcommand("train", "cross-validate, then fit and save the full model");
    train->add_option("--config", o.config, "run configuration (JSON)");
    train->add_option("--data", o.data, "dataset directory")->required();
    train->add_option("--out", o.out, "output directory")->required();
    add_seed(train);

    auto* eval = app.add_subcommand("eval", "score a dataset with a checkpoint");
    eval->add_option("--checkpoint", o.checkpoint, "checkpoint.json")->required();
    eval->add_option("--data", o.data, "dataset directory")->required();
    eval->add_option("--out", o.out, "output directory")->required();

    auto* explain = app.add_subcommand("explain", "export interpretability records and group maps");
    explain->add_option("--checkpoint", o.checkpoint, "checkpoint.json")->required();
    explain->add_option("--data", o.data, "dataset directory")->required();
    explain->add_option("--subnet-map", o.subnet_map, "subnetwork map (JSON label -> ROI list)");
    explain->add_option("--out", o.out, "output directory")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every loss term");
    add_seed(gradcheck);
    gradcheck->add_option("--corrupt", o.corrupt, "perturb the analytic gradient of this term (harness self-test)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return cmd_synth(o);
        if (pretrain->parsed()) return cmd_pretrain(o);
        if (train->parsed()) return cmd_train(o);
        if (eval->parsed()) return cmd_eval(o);
        if (explain->parsed()) return cmd_explain(o);
        if (gradcheck->parsed()) return cmd_gradcheck(o);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const SchemaError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 2;
}
