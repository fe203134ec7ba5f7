#pragma once

// On-disk formats: run configuration, dataset directories, checkpoints,
// evaluation reports and loss-curve CSVs.
//
// Checkpoint tensors are written at full round-trip precision so a reload is
// bit-exact; every other number is rounded to 9 significant digits.

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "app.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "synthgen.hpp"
#include "trainer.hpp"

namespace brainstr {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline constexpr int kFormatVersion = 1;

// ---------------------------------------------------------------- text helpers

inline double round9(double x) {
    if (!std::isfinite(x)) return x;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", x);
    return std::stod(buf);
}

inline std::string fmt9(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", x);
    return buf;
}

inline std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw SchemaError(p.string() + ": cannot open for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(p.parent_path(), ec);
        if (ec) throw SchemaError(p.parent_path().string() + ": cannot create directory: " + ec.message());
    }
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw SchemaError(p.string() + ": cannot open for writing");
    out << text;
    if (!out) throw SchemaError(p.string() + ": write failed");
}

inline Json read_json(const fs::path& p) {
    const std::string text = read_text(p);
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        // byte offset -> line number
        const std::size_t off = std::min<std::size_t>(e.byte, text.size());
        const long line = 1 + std::count(text.begin(), text.begin() + static_cast<long>(off), '\n');
        throw SchemaError(p.string() + ":" + std::to_string(line) + ": malformed JSON: " + e.what());
    }
}

inline void write_json(const fs::path& p, const Json& j) { write_text(p, j.dump(2) + "\n"); }

// ---------------------------------------------------------------- strict object reader

// Reads keys from one JSON object; finish() rejects keys nobody asked for.
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(path_ + "." + key + ": wrong type");
        }
    }

    template <class T>
    void require(const char* key, T& out) {
        if (!j_.contains(key)) throw ConfigError(path_ + "." + key + ": missing required key");
        get(key, out);
    }

    bool has(const char* key) const { return j_.contains(key); }

    ObjectReader child(const char* key) {
        seen_.insert(key);
        static const Json empty = Json::object();
        auto it = j_.find(key);
        return ObjectReader(it == j_.end() ? empty : *it, path_ + "." + key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(path_ + "." + it.key() + ": unknown key");
    }

private:
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

// ---------------------------------------------------------------- configuration

struct SynthJob {
    SynthConfig synth;
    int n_per_class = 25;
};

struct RunConfig {
    SynthJob synth;
    TrainConfig train;
    double final_tau_c = 0.0; // 0: use the most frequently selected CV value
};

inline void read_app_architecture(ObjectReader r, AppArchitecture& a, AppLossWeights& w) {
    r.get("window", a.window);
    r.get("hidden_channels", a.hidden_channels);
    r.get("kernel", a.kernel);
    r.get("dilations", a.dilations);
    r.get("latent_dim", a.latent_dim);
    r.get("state_dim", a.state_dim);
    r.get("lambda_smooth", w.lambda_smooth);
    r.get("lambda_orth", w.lambda_orth);
    r.finish();
}

inline void read_model_config(ObjectReader& r, ModelConfig& m) {
    {
        auto s = r.child("structgen");
        s.get("hidden", m.structgen.hidden);
        s.get("alpha_delta", m.structgen.alpha_delta);
        s.get("init_const", m.structgen.init_const);
        s.finish();
    }
    {
        auto e = r.child("encoder");
        e.get("e2e_channels", m.encoder.e2e_channels);
        e.get("e2n_channels", m.encoder.e2n_channels);
        e.get("hidden", m.encoder.hidden);
        e.get("embed_dim", m.encoder.embed_dim);
        e.get("leaky_slope", m.encoder.leaky_slope);
        e.finish();
    }
    {
        auto a = r.child("attention");
        a.get("hidden", m.attention.hidden);
        a.finish();
    }
    m.attention.embed_dim = m.encoder.embed_dim;
}

inline RunConfig parse_run_config(const Json& j) {
    RunConfig c;
    ObjectReader root(j, "config");
    {
        auto s = root.child("synth");
        auto& sc = c.synth.synth;
        s.get("n_rois", sc.n_rois);
        s.get("n_timepoints", sc.n_timepoints);
        s.get("n_states", sc.n_states);
        s.get("min_phase_len", sc.min_phase_len);
        s.get("noise_sigma", sc.noise_sigma);
        std::vector<std::array<int, 2>> block;
        if (s.has("discriminative_block")) {
            s.get("discriminative_block", block);
            sc.discriminative_block.clear();
            for (const auto& b : block) sc.discriminative_block.push_back({std::min(b[0], b[1]), std::max(b[0], b[1])});
        } else {
            s.get("discriminative_block", block);
        }
        s.get("discriminative_states", sc.discriminative_states);
        s.get("effect_size", sc.effect_size);
        s.get("seed", sc.seed);
        s.get("n_per_class", c.synth.n_per_class);
        s.finish();
        sc.validate();
        if (c.synth.n_per_class < 1) throw ConfigError("config.synth.n_per_class: must be >= 1");
    }
    {
        auto t = root.child("train");
        auto& tc = c.train;
        t.get("app_epochs", tc.app_epochs);
        t.get("main_epochs", tc.main_epochs);
        t.get("learning_rate", tc.learning_rate);
        t.get("batch_size", tc.batch_size);
        t.get("seed", tc.seed);
        t.get("folds", tc.folds);
        t.get("tau_c_grid", tc.tau_c_grid);
        t.get("inner_val_fraction", tc.inner_val_fraction);
        t.get("clip_norm", tc.clip_norm);
        t.get("min_fc_len", tc.min_fc_len);
        t.get("app_batch_size", tc.app_batch_size);
        t.get("app_segments_per_subject", tc.app_segments_per_subject);
        t.get("segment_step", tc.segment_step);
        t.get("final_tau_c", c.final_tau_c);
        read_app_architecture(t.child("app"), tc.app, tc.app_weights);
        read_model_config(t, tc.model);
        {
            auto r = t.child("regularizers");
            r.get("delta_margin", tc.reg.delta_margin);
            r.get("lambda_bin", tc.reg.lambda_bin);
            r.get("lambda_ms", tc.reg.lambda_ms);
            r.get("lambda_sp", tc.reg.lambda_sp);
            r.finish();
        }
        {
            auto r = t.child("contrast");
            r.get("w_ref", tc.contrast.w_ref);
            r.get("w_usl", tc.contrast.w_usl);
            r.get("tau", tc.contrast.tau);
            r.get("beta", tc.contrast.beta);
            r.get("lambda_str", tc.contrast.lambda_str);
            r.finish();
        }
        t.finish();
        tc.validate();
        tc.app.validate();
        if (!(c.final_tau_c >= 0.0)) throw ConfigError("config.train.final_tau_c: must be >= 0");
    }
    root.finish();
    return c;
}

inline RunConfig load_run_config(const fs::path& p) {
    try {
        return parse_run_config(read_json(p));
    } catch (const ConfigError& e) {
        throw ConfigError(p.string() + ": " + e.what());
    }
}

inline Json app_architecture_json(const AppArchitecture& a, const AppLossWeights& w) {
    return Json{{"window", a.window},         {"hidden_channels", a.hidden_channels}, {"kernel", a.kernel},
                {"dilations", a.dilations},   {"latent_dim", a.latent_dim},           {"state_dim", a.state_dim},
                {"lambda_smooth", w.lambda_smooth}, {"lambda_orth", w.lambda_orth}};
}

inline Json model_config_json(const ModelConfig& m) {
    return Json{{"structgen", {{"hidden", m.structgen.hidden},
                               {"alpha_delta", m.structgen.alpha_delta},
                               {"init_const", m.structgen.init_const}}},
                {"encoder", {{"e2e_channels", m.encoder.e2e_channels},
                             {"e2n_channels", m.encoder.e2n_channels},
                             {"hidden", m.encoder.hidden},
                             {"embed_dim", m.encoder.embed_dim},
                             {"leaky_slope", m.encoder.leaky_slope}}},
                {"attention", {{"hidden", m.attention.hidden}}}};
}

inline Json run_config_json(const RunConfig& c) {
    const auto& s = c.synth.synth;
    Json block = Json::array();
    for (const auto& p : s.discriminative_block) block.push_back({p.i, p.j});
    Json synth{{"n_rois", s.n_rois},
               {"n_timepoints", s.n_timepoints},
               {"n_states", s.n_states},
               {"min_phase_len", s.min_phase_len},
               {"noise_sigma", s.noise_sigma},
               {"discriminative_block", block},
               {"discriminative_states", s.discriminative_states},
               {"effect_size", s.effect_size},
               {"seed", s.seed},
               {"n_per_class", c.synth.n_per_class}};
    const auto& t = c.train;
    Json train{{"app_epochs", t.app_epochs},
               {"main_epochs", t.main_epochs},
               {"learning_rate", t.learning_rate},
               {"batch_size", t.batch_size},
               {"seed", t.seed},
               {"folds", t.folds},
               {"tau_c_grid", t.tau_c_grid},
               {"inner_val_fraction", t.inner_val_fraction},
               {"clip_norm", t.clip_norm},
               {"min_fc_len", t.min_fc_len},
               {"app_batch_size", t.app_batch_size},
               {"app_segments_per_subject", t.app_segments_per_subject},
               {"segment_step", t.segment_step},
               {"final_tau_c", c.final_tau_c},
               {"app", app_architecture_json(t.app, t.app_weights)}};
    const Json model = model_config_json(t.model);
    for (auto it = model.begin(); it != model.end(); ++it) train[it.key()] = *it;
    train["regularizers"] = {{"delta_margin", t.reg.delta_margin},
                             {"lambda_bin", t.reg.lambda_bin},
                             {"lambda_ms", t.reg.lambda_ms},
                             {"lambda_sp", t.reg.lambda_sp}};
    train["contrast"] = {{"w_ref", t.contrast.w_ref},
                         {"w_usl", t.contrast.w_usl},
                         {"tau", t.contrast.tau},
                         {"beta", t.contrast.beta},
                         {"lambda_str", t.contrast.lambda_str}};
    return Json{{"synth", synth}, {"train", train}};
}

// ---------------------------------------------------------------- dataset directory
//
// <dir>/manifest.json   {"format_version", "subjects": [{subject_id, label, file, truth, T, N}]}
// <dir>/subjects/<id>.csv   T lines of N comma-separated values
// <dir>/truth/<id>.json     {"boundaries": [...], "edges": ["i,j", ...], "phase_states": [...]}

inline std::string signal_csv(const Matrix& x) {
    std::string out;
    out.reserve(static_cast<std::size_t>(x.size()) * 16);
    for (Index r = 0; r < x.rows(); ++r) {
        for (Index c = 0; c < x.cols(); ++c) {
            if (c) out += ',';
            out += fmt9(x(r, c));
        }
        out += '\n';
    }
    return out;
}

inline Matrix parse_signal_csv(const std::string& text, const std::string& where, Index t_expected, Index n_expected) {
    Matrix x(t_expected, n_expected);
    std::istringstream in(text);
    std::string line;
    Index row = 0;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string at = where + ":" + std::to_string(lineno) + ": ";
        if (row >= t_expected) throw SchemaError(at + "more than T=" + std::to_string(t_expected) + " rows");
        Index col = 0;
        std::size_t pos = 0;
        while (true) {
            const std::size_t comma = line.find(',', pos);
            const std::string cell = line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            if (col >= n_expected) throw SchemaError(at + "more than N=" + std::to_string(n_expected) + " columns");
            std::size_t used = 0;
            double v;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                throw SchemaError(at + "column " + std::to_string(col + 1) + ": not a number: '" + cell + "'");
            }
            if (used != cell.size() || !std::isfinite(v))
                throw SchemaError(at + "column " + std::to_string(col + 1) + ": not a finite number: '" + cell + "'");
            x(row, col++) = v;
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (col != n_expected)
            throw SchemaError(at + "expected " + std::to_string(n_expected) + " columns, found " + std::to_string(col));
        ++row;
    }
    if (row != t_expected)
        throw SchemaError(where + ": expected T=" + std::to_string(t_expected) + " rows, found " + std::to_string(row));
    return x;
}

inline Json truth_json(const BoldRecording& r) {
    Json j = Json::object();
    if (r.true_boundaries) j["boundaries"] = *r.true_boundaries;
    if (r.true_edges) {
        Json e = Json::array();
        for (const auto& p : *r.true_edges) e.push_back(std::to_string(p.i) + "," + std::to_string(p.j));
        j["edges"] = e;
    }
    if (!r.phase_states.empty()) j["phase_states"] = r.phase_states;
    return j;
}

inline void write_dataset(const fs::path& dir, const std::vector<BoldRecording>& data) {
    Json subjects = Json::array();
    for (const auto& r : data) {
        const std::string file = "subjects/" + r.subject_id + ".csv";
        const std::string truth = "truth/" + r.subject_id + ".json";
        write_text(dir / file, signal_csv(r.signal));
        write_json(dir / truth, truth_json(r));
        subjects.push_back(Json{{"subject_id", r.subject_id},
                                {"label", r.label},
                                {"file", file},
                                {"truth", truth},
                                {"T", r.n_timepoints()},
                                {"N", r.n_rois()}});
    }
    write_json(dir / "manifest.json", Json{{"format_version", kFormatVersion}, {"subjects", subjects}});
}

inline RoiPair parse_edge(const std::string& s, const std::string& where) {
    const auto comma = s.find(',');
    try {
        if (comma == std::string::npos) throw std::invalid_argument("no comma");
        std::size_t u1 = 0, u2 = 0;
        const std::string a = s.substr(0, comma), b = s.substr(comma + 1);
        const int i = std::stoi(a, &u1), j = std::stoi(b, &u2);
        if (u1 != a.size() || u2 != b.size()) throw std::invalid_argument("trailing text");
        return {std::min(i, j), std::max(i, j)};
    } catch (const std::exception&) {
        throw SchemaError(where + ": edge '" + s + "' is not of the form \"i,j\"");
    }
}

// Validates the whole manifest and checks every referenced file exists before
// reading any signal.
inline std::vector<BoldRecording> read_dataset(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.json";
    const Json m = read_json(mpath);
    const std::string where = mpath.string();
    if (!m.is_object() || !m.contains("subjects") || !m["subjects"].is_array())
        throw SchemaError(where + ": expected an object with a \"subjects\" array");
    if (m.value("format_version", 0) != kFormatVersion)
        throw SchemaError(where + ": unsupported format_version");

    struct Entry {
        std::string id, file, truth;
        int label;
        Index t, n;
    };
    std::vector<Entry> entries;
    std::set<std::string> ids;
    for (std::size_t k = 0; k < m["subjects"].size(); ++k) {
        const Json& s = m["subjects"][k];
        const std::string at = where + ": subjects[" + std::to_string(k) + "]";
        Entry e;
        try {
            e.id = s.at("subject_id").get<std::string>();
            e.label = s.at("label").get<int>();
            e.file = s.at("file").get<std::string>();
            e.truth = s.value("truth", std::string());
            e.t = s.at("T").get<Index>();
            e.n = s.at("N").get<Index>();
        } catch (const nlohmann::json::exception& ex) {
            throw SchemaError(at + ": " + ex.what());
        }
        if (e.label != 0 && e.label != 1) throw SchemaError(at + ": label must be 0 or 1");
        if (e.t < 1 || e.n < 2) throw SchemaError(at + ": need T >= 1 and N >= 2");
        if (!ids.insert(e.id).second) throw SchemaError(at + ": duplicate subject_id " + e.id);
        if (!fs::exists(dir / e.file)) throw SchemaError(at + ": missing subject file " + (dir / e.file).string());
        if (!e.truth.empty() && !fs::exists(dir / e.truth))
            throw SchemaError(at + ": missing truth file " + (dir / e.truth).string());
        if (!entries.empty() && e.n != entries.front().n) throw SchemaError(at + ": N differs from earlier subjects");
        entries.push_back(std::move(e));
    }
    if (entries.empty()) throw SchemaError(where + ": no subjects");

    std::vector<BoldRecording> out;
    for (const auto& e : entries) {
        BoldRecording r;
        r.subject_id = e.id;
        r.label = e.label;
        r.signal = parse_signal_csv(read_text(dir / e.file), (dir / e.file).string(), e.t, e.n);
        if (!e.truth.empty()) {
            const fs::path tp = dir / e.truth;
            const Json tj = read_json(tp);
            try {
                if (tj.contains("boundaries")) {
                    r.true_boundaries = tj["boundaries"].get<std::vector<int>>();
                    validate_boundaries(*r.true_boundaries, static_cast<int>(e.t));
                }
                if (tj.contains("edges")) {
                    std::vector<RoiPair> edges;
                    for (const auto& s : tj["edges"]) edges.push_back(parse_edge(s.get<std::string>(), tp.string()));
                    r.true_edges = edges;
                }
                if (tj.contains("phase_states")) r.phase_states = tj["phase_states"].get<std::vector<int>>();
            } catch (const nlohmann::json::exception& ex) {
                throw SchemaError(tp.string() + ": " + ex.what());
            } catch (const DimensionError& ex) {
                throw SchemaError(tp.string() + ": " + ex.what());
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------- tensors and checkpoints

inline Json matrix_json(const Matrix& m) {
    Json rows = Json::array();
    for (Index i = 0; i < m.rows(); ++i) {
        Json row = Json::array();
        for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Matrix matrix_from_json(const Json& j, Index rows, Index cols, const std::string& what) {
    if (!j.is_array() || static_cast<Index>(j.size()) != rows)
        throw SchemaError(what + ": expected " + std::to_string(rows) + " rows");
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        const Json& row = j[static_cast<std::size_t>(i)];
        if (!row.is_array() || static_cast<Index>(row.size()) != cols)
            throw SchemaError(what + ": row " + std::to_string(i) + " must have " + std::to_string(cols) + " entries");
        for (Index c = 0; c < cols; ++c) {
            if (!row[static_cast<std::size_t>(c)].is_number()) throw SchemaError(what + ": non-numeric entry");
            m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
        }
    }
    return m;
}

inline Json parameters_json(const std::vector<Parameter*>& params) {
    Json j = Json::object();
    for (const Parameter* p : params) j[p->name] = matrix_json(p->value);
    return j;
}

// Shapes come from the freshly constructed model; every tensor must be present.
inline void load_parameters(const Json& j, const std::vector<Parameter*>& params, const std::string& what) {
    if (!j.is_object()) throw SchemaError(what + ": parameters must be an object");
    std::set<std::string> expected;
    for (Parameter* p : params) {
        expected.insert(p->name);
        if (!j.contains(p->name)) throw SchemaError(what + ": missing tensor " + p->name);
        p->value = matrix_from_json(j[p->name], p->value.rows(), p->value.cols(), what + ": " + p->name);
        p->zero_grad();
    }
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!expected.count(it.key())) throw SchemaError(what + ": unexpected tensor " + it.key());
}

inline Json app_json(const AppModel& model, const AppLossWeights& weights = {}) {
    AppModel copy = model;
    const auto& a = model.architecture();
    Json arch = app_architecture_json(a, weights);
    arch["n_rois"] = a.n_rois;
    return Json{{"format_version", kFormatVersion},
                {"kind", "app"},
                {"architecture", arch},
                {"state_mean", matrix_json(model.state_mean())},
                {"state_var", matrix_json(model.state_var())},
                {"parameters", parameters_json(copy.parameters())}};
}

inline AppModel app_from_json(const Json& j, const std::string& what = "app checkpoint") {
    try {
        if (j.at("format_version").get<int>() != kFormatVersion) throw SchemaError(what + ": unsupported format_version");
        if (j.at("kind").get<std::string>() != "app") throw SchemaError(what + ": not an APP checkpoint");
        const Json& aj = j.at("architecture");
        AppArchitecture a;
        a.n_rois = aj.at("n_rois").get<int>();
        a.window = aj.at("window").get<int>();
        a.hidden_channels = aj.at("hidden_channels").get<int>();
        a.kernel = aj.at("kernel").get<int>();
        a.dilations = aj.at("dilations").get<std::vector<int>>();
        a.latent_dim = aj.at("latent_dim").get<int>();
        a.state_dim = aj.at("state_dim").get<int>();
        AppModel m(a, 0);
        load_parameters(j.at("parameters"), m.parameters(), what);
        Matrix mean = matrix_from_json(j.at("state_mean"), 1, a.state_dim, what + ": state_mean");
        Matrix var = matrix_from_json(j.at("state_var"), 1, a.state_dim, what + ": state_var");
        m.set_state_statistics(mean.row(0), var.row(0));
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(what + ": " + e.what());
    } catch (const ConfigError& e) {
        throw SchemaError(what + ": " + e.what());
    } catch (const DimensionError& e) {
        throw SchemaError(what + ": " + e.what());
    }
}

inline Json model_json(const BrainStrModel& model) {
    BrainStrModel copy = model;
    Json cfg = model_config_json(model.config());
    cfg["n_rois"] = model.n_rois();
    return Json{{"format_version", kFormatVersion},
                {"kind", "classifier"},
                {"config", cfg},
                {"parameters", parameters_json(copy.parameters())}};
}

inline BrainStrModel model_from_json(const Json& j, const std::string& what = "model checkpoint") {
    try {
        if (j.at("format_version").get<int>() != kFormatVersion) throw SchemaError(what + ": unsupported format_version");
        if (j.at("kind").get<std::string>() != "classifier") throw SchemaError(what + ": not a classifier checkpoint");
        const Json& cj = j.at("config");
        ModelConfig mc;
        Json body = cj;
        const int n = body.at("n_rois").get<int>();
        body.erase("n_rois");
        ObjectReader r(body, what + ".config");
        read_model_config(r, mc);
        r.finish();
        mc.set_n_rois(n);
        BrainStrModel m(mc, 0);
        load_parameters(j.at("parameters"), m.parameters(), what);
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(what + ": " + e.what());
    } catch (const ConfigError& e) {
        throw SchemaError(what + ": " + e.what());
    }
}

// Everything needed to classify a new recording.
struct Checkpoint {
    AppModel app;
    BrainStrModel model;
    double tau_c = 0.1;
    int min_fc_len = kDefaultMinFcLen;
    int segment_step = 1;
};

inline Json checkpoint_json(const Checkpoint& c) {
    return Json{{"format_version", kFormatVersion},
                {"kind", "bundle"},
                {"tau_c", c.tau_c},
                {"min_fc_len", c.min_fc_len},
                {"segment_step", c.segment_step},
                {"app", app_json(c.app)},
                {"model", model_json(c.model)}};
}

inline Checkpoint checkpoint_from_json(const Json& j, const std::string& what = "checkpoint") {
    try {
        if (j.at("format_version").get<int>() != kFormatVersion) throw SchemaError(what + ": unsupported format_version");
        if (j.at("kind").get<std::string>() != "bundle") throw SchemaError(what + ": not a bundle checkpoint");
        Checkpoint c{app_from_json(j.at("app"), what + ".app"), model_from_json(j.at("model"), what + ".model"),
                     j.at("tau_c").get<double>(), j.at("min_fc_len").get<int>(), j.at("segment_step").get<int>()};
        if (c.app.architecture().n_rois != c.model.n_rois()) throw SchemaError(what + ": APP and classifier disagree on N");
        if (!(c.tau_c > 0.0) || c.min_fc_len < 2 || c.segment_step < 1) throw SchemaError(what + ": invalid partition settings");
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(what + ": " + e.what());
    }
}

inline void save_checkpoint(const fs::path& p, const Checkpoint& c) { write_json(p, checkpoint_json(c)); }
inline Checkpoint load_checkpoint(const fs::path& p) { return checkpoint_from_json(read_json(p), p.string()); }

// Boundaries and FC for one recording under a checkpoint.
inline PhasePartition partition_with(const Checkpoint& c, const Matrix& signal) {
    if (signal.cols() != c.model.n_rois())
        throw DimensionError("recording has N=" + std::to_string(signal.cols()) + ", checkpoint expects N=" +
                             std::to_string(c.model.n_rois()));
    const SegmentLatents lat = encode_signal(c.app, signal, c.segment_step);
    ChangepointConfig cp{c.tau_c, c.min_fc_len};
    const auto b = detect_changepoints(lat.state, cp, c.app.architecture().window, c.segment_step, signal.rows());
    return build_partition(signal, b, c.min_fc_len);
}

// ---------------------------------------------------------------- reports and curves

inline Json vec9(const std::vector<double>& v) {
    Json j = Json::array();
    for (double x : v) j.push_back(round9(x));
    return j;
}

inline Json metrics_json(const Metrics& m) {
    return Json{{"accuracy", round9(m.accuracy)},
                {"auc", round9(m.auc)},
                {"confusion", {{m.confusion[0][0], m.confusion[0][1]}, {m.confusion[1][0], m.confusion[1][1]}}}};
}

inline Json eval_report_json(const EvalReport& r) {
    Json folds = Json::array();
    for (const auto& f : r.folds) {
        folds.push_back(Json{{"fold", f.fold},
                             {"selected_tau_c", round9(f.selected_tau)},
                             {"tau_c_grid", vec9(f.tau_grid)},
                             {"validation_accuracy", vec9(f.validation_accuracy)},
                             {"validation_auc", vec9(f.validation_auc)},
                             {"test", metrics_json(f.test)},
                             {"test_ids", f.test_ids},
                             {"test_labels", f.test_labels},
                             {"test_scores", vec9(f.test_scores)},
                             {"test_phase_counts", f.test_phase_counts},
                             {"train_ids", f.train_ids},
                             {"inner_train_ids", f.inner_train_ids},
                             {"validation_ids", f.validation_ids},
                             {"initial_train_ce", round9(f.initial_train_ce)},
                             {"final_train_ce", round9(f.final_train_ce)}});
    }
    return Json{{"format_version", kFormatVersion},
                {"kind", "eval_report"},
                {"mean_accuracy", round9(r.mean_accuracy)},
                {"std_accuracy", round9(r.std_accuracy)},
                {"mean_auc", round9(r.mean_auc)},
                {"std_auc", round9(r.std_auc)},
                {"leakage_checks_passed", r.leakage_checks_passed},
                {"folds", folds}};
}

inline double unit_interval(const Json& j, const char* key, const std::string& what) {
    const double v = j.at(key).get<double>();
    if (!(v >= 0.0 && v <= 1.0)) throw SchemaError(what + ": " + key + " outside [0, 1]");
    return v;
}

// Re-reads a report and checks its invariants.
inline EvalReport eval_report_from_json(const Json& j, const std::string& what = "eval report") {
    try {
        if (j.at("kind").get<std::string>() != "eval_report") throw SchemaError(what + ": not an eval report");
        EvalReport r;
        r.mean_accuracy = unit_interval(j, "mean_accuracy", what);
        r.mean_auc = unit_interval(j, "mean_auc", what);
        r.std_accuracy = j.at("std_accuracy").get<double>();
        r.std_auc = j.at("std_auc").get<double>();
        if (!(r.std_accuracy >= 0.0) || !(r.std_auc >= 0.0)) throw SchemaError(what + ": negative std");
        r.leakage_checks_passed = j.at("leakage_checks_passed").get<bool>();
        for (const auto& fj : j.at("folds")) {
            FoldReport f;
            f.fold = fj.at("fold").get<int>();
            f.selected_tau = fj.at("selected_tau_c").get<double>();
            f.tau_grid = fj.at("tau_c_grid").get<std::vector<double>>();
            f.validation_accuracy = fj.at("validation_accuracy").get<std::vector<double>>();
            f.validation_auc = fj.at("validation_auc").get<std::vector<double>>();
            f.test.accuracy = unit_interval(fj.at("test"), "accuracy", what);
            f.test.auc = unit_interval(fj.at("test"), "auc", what);
            const auto conf = fj.at("test").at("confusion").get<std::vector<std::vector<int>>>();
            if (conf.size() != 2 || conf[0].size() != 2 || conf[1].size() != 2) throw SchemaError(what + ": bad confusion matrix");
            for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b) f.test.confusion[a][b] = conf[a][b];
            f.test_ids = fj.at("test_ids").get<std::vector<std::string>>();
            f.test_labels = fj.at("test_labels").get<std::vector<int>>();
            f.test_scores = fj.at("test_scores").get<std::vector<double>>();
            f.test_phase_counts = fj.at("test_phase_counts").get<std::vector<int>>();
            f.train_ids = fj.at("train_ids").get<std::vector<std::string>>();
            f.inner_train_ids = fj.at("inner_train_ids").get<std::vector<std::string>>();
            f.validation_ids = fj.at("validation_ids").get<std::vector<std::string>>();
            f.initial_train_ce = fj.at("initial_train_ce").get<double>();
            f.final_train_ce = fj.at("final_train_ce").get<double>();
            if (f.test_ids.size() != f.test_labels.size() || f.test_ids.size() != f.test_scores.size())
                throw SchemaError(what + ": fold " + std::to_string(f.fold) + " test lists differ in length");
            r.folds.push_back(std::move(f));
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(what + ": " + e.what());
    }
}

// CSV with header "epoch,term,value"; epochs count from 1.
inline std::string curves_csv(const std::vector<std::string>& terms, const std::vector<std::vector<double>>& values) {
    std::string out = "epoch,term,value\n";
    for (std::size_t e = 0; e < values.size(); ++e)
        for (std::size_t k = 0; k < terms.size(); ++k)
            out += std::to_string(e + 1) + "," + terms[k] + "," + fmt9(values[e][k]) + "\n";
    return out;
}

inline std::string app_curves_csv(const PretrainResult& r) {
    std::vector<std::vector<double>> v;
    for (std::size_t e = 0; e < r.loss_curve.size(); ++e)
        v.push_back({r.loss_curve[e], r.recon_curve[e], r.smooth_curve[e], r.orth_curve[e]});
    return curves_csv({"total", "recon", "smooth", "orth"}, v);
}

struct CurveRow {
    int epoch;
    std::string term;
    double value;
};

inline std::vector<CurveRow> parse_curves_csv(const std::string& text, const std::string& where) {
    std::istringstream in(text);
    std::string line;
    std::vector<CurveRow> rows;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1) {
            if (line != "epoch,term,value") throw SchemaError(where + ":1: expected header epoch,term,value");
            continue;
        }
        if (line.empty()) continue;
        const auto c1 = line.find(','), c2 = line.rfind(',');
        if (c1 == std::string::npos || c1 == c2) throw SchemaError(where + ":" + std::to_string(lineno) + ": expected 3 fields");
        try {
            rows.push_back({std::stoi(line.substr(0, c1)), line.substr(c1 + 1, c2 - c1 - 1), std::stod(line.substr(c2 + 1))});
        } catch (const std::exception&) {
            throw SchemaError(where + ":" + std::to_string(lineno) + ": malformed row");
        }
    }
    return rows;
}

} // namespace brainstr
