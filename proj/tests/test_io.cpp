#include <gtest/gtest.h>

#include "brainstr/io.hpp"
#include "test_util.hpp"

using namespace brainstr;
using brainstr::testing::TempDir;

namespace {

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const std::exception& e) {
        return e.what();
    }
    return {};
}

ModelConfig small_model(int n) {
    ModelConfig m;
    m.structgen.hidden = 5;
    m.encoder.e2e_channels = 2;
    m.encoder.e2n_channels = 3;
    m.encoder.hidden = 7;
    m.encoder.embed_dim = 4;
    m.attention.embed_dim = 4;
    m.attention.hidden = 3;
    m.set_n_rois(n);
    return m;
}

AppArchitecture small_app(int n) {
    AppArchitecture a;
    a.n_rois = n;
    a.window = 10;
    a.hidden_channels = 4;
    a.dilations = {1, 2};
    a.latent_dim = 4;
    a.state_dim = 2;
    return a;
}

} // namespace

TEST(Config, DefaultsRoundTrip) {
    RunConfig c;
    c.train.tau_c_grid = {0.2, 0.7};
    c.train.model.structgen.init_const = 0.3;
    c.synth.synth.discriminative_block = {{1, 2}, {0, 5}};
    c.final_tau_c = 0.25;
    const Json j = run_config_json(c);
    const RunConfig back = parse_run_config(j);
    EXPECT_EQ(run_config_json(back), j);
    EXPECT_EQ(back.train.tau_c_grid, c.train.tau_c_grid);
    EXPECT_EQ(back.final_tau_c, 0.25);
}

TEST(Config, EmptyObjectGivesDefaults) {
    const RunConfig c = parse_run_config(Json::object());
    EXPECT_EQ(c.train.main_epochs, TrainConfig{}.main_epochs);
    EXPECT_EQ(c.synth.n_per_class, 25);
}

TEST(Config, UnknownKeyIsNamed) {
    Json j = Json::parse(R"({"train": {"contrast": {"temprature": 0.5}}})");
    const std::string msg = error_of([&] { parse_run_config(j); });
    EXPECT_NE(msg.find("temprature"), std::string::npos) << msg;
    EXPECT_THROW(parse_run_config(Json::parse(R"({"trian": {}})")), ConfigError);
    EXPECT_THROW(parse_run_config(Json::parse(R"({"train": {"main_epochs": "many"}})")), ConfigError);
    EXPECT_THROW(parse_run_config(Json::parse(R"({"train": {"batch_size": 1}})")), ConfigError);
}

TEST(Config, FileErrorsNameThePath) {
    TempDir d("cfg");
    write_text(d.path() / "c.json", R"({"synth": {"bogus": 1}})");
    const std::string msg = error_of([&] { load_run_config(d.path() / "c.json"); });
    EXPECT_NE(msg.find("c.json"), std::string::npos);
    EXPECT_NE(msg.find("bogus"), std::string::npos);
    EXPECT_THROW(load_run_config(d.path() / "absent.json"), std::exception);
}

TEST(Dataset, WriteReadPreservesEverythingToNineDigits) {
    SynthConfig s;
    s.n_rois = 5;
    s.n_timepoints = 120;
    s.min_phase_len = 30;
    s.discriminative_block = {{0, 1}, {1, 2}};
    const auto data = generate_dataset(s, 3);
    TempDir d("ds");
    write_dataset(d.path(), data);
    const auto back = read_dataset(d.path());
    ASSERT_EQ(back.size(), data.size());
    for (std::size_t k = 0; k < data.size(); ++k) {
        EXPECT_EQ(back[k].subject_id, data[k].subject_id);
        EXPECT_EQ(back[k].label, data[k].label);
        EXPECT_EQ(back[k].true_boundaries, data[k].true_boundaries);
        EXPECT_EQ(back[k].phase_states, data[k].phase_states);
        ASSERT_EQ(back[k].true_edges.has_value(), data[k].true_edges.has_value());
        if (data[k].true_edges) {
            ASSERT_EQ(back[k].true_edges->size(), data[k].true_edges->size());
            for (std::size_t e = 0; e < data[k].true_edges->size(); ++e) {
                EXPECT_EQ((*back[k].true_edges)[e].i, (*data[k].true_edges)[e].i);
                EXPECT_EQ((*back[k].true_edges)[e].j, (*data[k].true_edges)[e].j);
            }
        }
        EXPECT_LE((back[k].signal - data[k].signal).cwiseAbs().maxCoeff(), 1e-8);
    }
    // a second write of what was read is byte-identical
    TempDir d2("ds2");
    write_dataset(d2.path(), back);
    EXPECT_EQ(read_text(d2.path() / "subjects" / "sub-000.csv"), read_text(d.path() / "subjects" / "sub-000.csv"));
}

TEST(Dataset, MissingSubjectFileFailsFastNamingIt) {
    SynthConfig s;
    s.n_rois = 4;
    s.n_timepoints = 100;
    s.min_phase_len = 30;
    s.discriminative_block = {{0, 1}};
    TempDir d("miss");
    write_dataset(d.path(), generate_dataset(s, 2));
    fs::remove(d.path() / "subjects" / "sub-002.csv");
    const std::string msg = error_of([&] { read_dataset(d.path()); });
    EXPECT_NE(msg.find("sub-002.csv"), std::string::npos) << msg;
}

TEST(Dataset, MalformedSignalsAreRejected) {
    SynthConfig s;
    s.n_rois = 4;
    s.n_timepoints = 100;
    s.min_phase_len = 30;
    s.discriminative_block = {{0, 1}};
    TempDir d("bad");
    write_dataset(d.path(), generate_dataset(s, 1));
    write_text(d.path() / "subjects" / "sub-000.csv", "1,2,3\n");
    EXPECT_THROW(read_dataset(d.path()), SchemaError);
    EXPECT_THROW(read_dataset(d.path() / "nowhere"), std::exception);
    EXPECT_THROW(parse_edge("3;4", "x"), SchemaError);
    EXPECT_EQ(parse_edge("4,3", "x").i, 3);
}

TEST(Checkpoint, ForwardOutputsSurviveARoundTripBitExactly) {
    const int n = 5;
    BrainStrModel model(small_model(n), 17);
    AppModel app(small_app(n), 23);
    const Matrix sig = brainstr::testing::random_matrix(90, n, 4);
    app.update_state_statistics({segment(sig, 10, 1)});
    // perturb every tensor so zero-initialized layers are exercised too
    std::uint64_t k = 0;
    for (Parameter* p : model.parameters()) p->value += brainstr::testing::random_matrix(p->value.rows(), p->value.cols(), ++k, 0.05);
    Checkpoint c{app, model, 0.07, 5, 1};

    TempDir d("ckpt");
    save_checkpoint(d.path() / "m.json", c);
    const Checkpoint back = load_checkpoint(d.path() / "m.json");
    EXPECT_EQ(back.tau_c, 0.07);

    const SegmentLatents a = encode_signal(c.app, sig, 1), b = encode_signal(back.app, sig, 1);
    EXPECT_EQ(a.residual, b.residual);
    EXPECT_EQ(a.state, b.state);
    const PhasePartition pa = partition_with(c, sig), pb = partition_with(back, sig);
    EXPECT_EQ(pa.boundaries, pb.boundaries);
    EXPECT_EQ(predict_scores(c.model, {&pa}), predict_scores(back.model, {&pb}));
    ad::Tape t1, t2;
    EXPECT_EQ(forward_batch(t1, c.model, {&pa}).logits.value(), forward_batch(t2, back.model, {&pb}).logits.value());
    EXPECT_THROW(partition_with(back, brainstr::testing::random_matrix(90, n + 1, 4)), DimensionError);
}

TEST(Checkpoint, CorruptFilesAreSchemaErrors) {
    const int n = 4;
    Checkpoint c{AppModel(small_app(n), 1), BrainStrModel(small_model(n), 2), 0.1, 5, 1};
    Json j = checkpoint_json(c);
    Json missing = j;
    missing["model"]["parameters"].erase(missing["model"]["parameters"].begin());
    EXPECT_THROW(checkpoint_from_json(missing), SchemaError);
    Json extra = j;
    extra["model"]["parameters"]["ghost"] = Json::array();
    EXPECT_THROW(checkpoint_from_json(extra), SchemaError);
    Json wrong = j;
    wrong["kind"] = "eval_report";
    EXPECT_THROW(checkpoint_from_json(wrong), SchemaError);
    Json mismatch = j;
    mismatch["app"] = app_json(AppModel(small_app(n + 1), 1));
    EXPECT_THROW(checkpoint_from_json(mismatch), SchemaError);
    EXPECT_NO_THROW(checkpoint_from_json(j));
}

TEST(Reports, EvalReportReparsesWithItsInvariants) {
    EvalReport r;
    r.mean_accuracy = 0.8;
    r.mean_auc = 0.9;
    r.leakage_checks_passed = true;
    FoldReport f;
    f.fold = 0;
    f.selected_tau = 0.1;
    f.tau_grid = {0.1, 0.5};
    f.validation_accuracy = {0.5, 0.75};
    f.validation_auc = {0.5, 1.0};
    f.test_ids = {"a", "b"};
    f.test_labels = {0, 1};
    f.test_scores = {0.25, 1.0 / 3.0};
    f.test_phase_counts = {3, 4};
    f.test = compute_metrics(f.test_scores, f.test_labels);
    r.folds.push_back(f);
    const Json j = eval_report_json(r);
    const EvalReport back = eval_report_from_json(Json::parse(j.dump()));
    EXPECT_EQ(eval_report_json(back), j);
    EXPECT_EQ(back.folds[0].test.confusion[0][0], 1);

    Json bad = j;
    bad["folds"][0]["test_scores"].push_back(0.5);
    EXPECT_THROW(eval_report_from_json(bad), SchemaError);
    bad = j;
    bad["mean_accuracy"] = 1.5;
    EXPECT_THROW(eval_report_from_json(bad), SchemaError);
}

TEST(Reports, CurvesCsvReparses) {
    const std::string text = curves_csv({"total", "ce"}, {{1.5, 0.25}, {1.0, 1e-12}});
    const auto rows = parse_curves_csv(text, "curves");
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[3].epoch, 2);
    EXPECT_EQ(rows[3].term, "ce");
    EXPECT_EQ(rows[3].value, 1e-12);
    EXPECT_THROW(parse_curves_csv("epoch,value\n", "x"), SchemaError);
    EXPECT_THROW(parse_curves_csv("epoch,term,value\n1,ce\n", "x"), SchemaError);
}
