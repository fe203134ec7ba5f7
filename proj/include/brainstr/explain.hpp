#pragma once

// Case-level and group-level interpretability: per-phase boundaries,
// importance, retained structure and subnetwork-pair strengths per subject,
// and group means of the binary structure in important vs non-important phases.

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "io.hpp"
#include "model.hpp"
#include "segfc.hpp"
#include "structgen.hpp"
#include "trainer.hpp"

namespace brainstr {

// Total map ROI -> subnetwork label; group names are kept in sorted order.
struct SubnetworkMap {
    std::vector<std::string> node_to_subnetwork;

    Index n_rois() const { return static_cast<Index>(node_to_subnetwork.size()); }

    std::vector<std::string> groups() const {
        std::vector<std::string> g = node_to_subnetwork;
        std::sort(g.begin(), g.end());
        g.erase(std::unique(g.begin(), g.end()), g.end());
        return g;
    }

    std::vector<Index> members(const std::string& g) const {
        std::vector<Index> out;
        for (Index i = 0; i < n_rois(); ++i)
            if (node_to_subnetwork[static_cast<std::size_t>(i)] == g) out.push_back(i);
        return out;
    }
};

// Every ROI in a single group called "all".
inline SubnetworkMap whole_brain_map(Index n) { return {std::vector<std::string>(static_cast<std::size_t>(n), "all")}; }

// JSON {"<label>": [roi, ...], ...}; every ROI in [0, n) exactly once.
inline SubnetworkMap subnetwork_map_from_json(const Json& j, Index n, const std::string& what = "subnetwork map") {
    if (!j.is_object()) throw SchemaError(what + ": expected an object of label -> ROI list");
    SubnetworkMap m{std::vector<std::string>(static_cast<std::size_t>(n))};
    std::vector<int> hits(static_cast<std::size_t>(n), 0);
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!it->is_array()) throw SchemaError(what + ": " + it.key() + " must list ROI indices");
        for (const auto& v : *it) {
            if (!v.is_number_integer()) throw SchemaError(what + ": " + it.key() + " has a non-integer ROI");
            const long r = v.get<long>();
            if (r < 0 || r >= n) throw SchemaError(what + ": ROI " + std::to_string(r) + " outside [0, " + std::to_string(n) + ")");
            ++hits[static_cast<std::size_t>(r)];
            m.node_to_subnetwork[static_cast<std::size_t>(r)] = it.key();
        }
    }
    for (Index r = 0; r < n; ++r) {
        if (hits[static_cast<std::size_t>(r)] == 0) throw SchemaError(what + ": ROI " + std::to_string(r) + " is unmapped");
        if (hits[static_cast<std::size_t>(r)] > 1) throw SchemaError(what + ": ROI " + std::to_string(r) + " is mapped more than once");
    }
    return m;
}

struct RetainedEdge {
    int i;
    int j;
    double weight; // A+_t[i, j]
};

struct PhaseRecord {
    int c_prev = 0;
    int c_cur = 0;
    double importance = 0.0; // alpha+_t
    bool important = false;
    double retained_ratio = 0.0;
    std::vector<RetainedEdge> edges; // upper triangle with binary mask 1
    Matrix mask;                     // binary structure
    Matrix retained_abs;             // |A+_t|
};

struct InterpretabilityRecord {
    std::string subject_id;
    int label = 0;
    int n_rois = 0;
    std::vector<PhaseRecord> phases;
    std::vector<std::string> subnetwork_pairs;  // "g|h" with g <= h
    Matrix subnetwork_strength;                 // W x pairs, divided by the subject maximum
};

// Mean |A+| over the edges joining groups g and h (i != j; unordered within a group).
inline double pair_strength(const Matrix& retained_abs, const std::vector<Index>& g, const std::vector<Index>& h, bool same) {
    double s = 0.0;
    long n = 0;
    for (std::size_t a = 0; a < g.size(); ++a)
        for (std::size_t b = same ? a + 1 : 0; b < h.size(); ++b) {
            if (g[a] == h[b]) continue;
            s += retained_abs(g[a], h[b]);
            ++n;
        }
    return n ? s / static_cast<double>(n) : 0.0;
}

inline InterpretabilityRecord explain_subject(const BrainStrModel& model, const PhasePartition& part,
                                              const std::string& subject_id, int label, const SubnetworkMap& map) {
    const Index n = model.n_rois();
    if (part.n_rois() != n)
        throw DimensionError("explain: recording has N=" + std::to_string(part.n_rois()) + ", model expects N=" +
                             std::to_string(n));
    if (map.n_rois() != n)
        throw DimensionError("explain: subnetwork map covers " + std::to_string(map.n_rois()) + " ROIs, model has " +
                             std::to_string(n));
    ad::Tape t;
    SubjectPass pass = forward_subject(t, model, part);
    const Matrix alpha = pass.bundle.alpha_plus.value();
    std::vector<bool> important(static_cast<std::size_t>(part.phase_count()), false);
    for (Index k : pass.bundle.important) important[static_cast<std::size_t>(k)] = true;

    InterpretabilityRecord rec;
    rec.subject_id = subject_id;
    rec.label = label;
    rec.n_rois = static_cast<int>(n);
    const auto groups = map.groups();
    std::vector<std::vector<Index>> members;
    for (const auto& g : groups) members.push_back(map.members(g));
    for (std::size_t a = 0; a < groups.size(); ++a)
        for (std::size_t b = a; b < groups.size(); ++b) rec.subnetwork_pairs.push_back(groups[a] + "|" + groups[b]);
    rec.subnetwork_strength = Matrix::Zero(part.phase_count(), static_cast<Index>(rec.subnetwork_pairs.size()));

    for (int p = 0; p < part.phase_count(); ++p) {
        PhaseRecord ph;
        ph.c_prev = part.boundaries[static_cast<std::size_t>(p)];
        ph.c_cur = part.boundaries[static_cast<std::size_t>(p + 1)];
        ph.importance = alpha(p, 0);
        ph.important = important[static_cast<std::size_t>(p)];
        ph.mask = pass.structures.binary[static_cast<std::size_t>(p)].value();
        const Matrix& aplus = pass.structures.positive[static_cast<std::size_t>(p)].value();
        ph.retained_abs = aplus.cwiseAbs();
        ph.retained_ratio = retained_ratio(ph.mask);
        for (Index i = 0; i < n; ++i)
            for (Index j = i + 1; j < n; ++j)
                if (ph.mask(i, j) > 0.5) ph.edges.push_back({static_cast<int>(i), static_cast<int>(j), aplus(i, j)});
        Index col = 0;
        for (std::size_t a = 0; a < groups.size(); ++a)
            for (std::size_t b = a; b < groups.size(); ++b)
                rec.subnetwork_strength(p, col++) = pair_strength(ph.retained_abs, members[a], members[b], a == b);
        rec.phases.push_back(std::move(ph));
    }
    const double mx = rec.subnetwork_strength.size() ? rec.subnetwork_strength.maxCoeff() : 0.0;
    if (mx > 0.0) rec.subnetwork_strength /= mx;
    return rec;
}

// Group means over subjects: each subject first averages its important (or
// non-important) phases; subjects with no such phase do not contribute.
struct GroupMaps {
    Matrix important_mask, nonimportant_mask;     // mean binary structure
    Matrix important_weight, nonimportant_weight; // mean |A+|
    int important_subjects = 0;
    int nonimportant_subjects = 0;
};

inline GroupMaps aggregate_group(const std::vector<InterpretabilityRecord>& recs, std::optional<int> label = {}) {
    if (recs.empty()) throw DimensionError("aggregate_group: no records");
    const Index n = recs.front().n_rois;
    GroupMaps g{Matrix::Zero(n, n), Matrix::Zero(n, n), Matrix::Zero(n, n), Matrix::Zero(n, n), 0, 0};
    for (const auto& r : recs) {
        if (r.n_rois != n) throw DimensionError("aggregate_group: records disagree on N");
        if (label && r.label != *label) continue;
        Matrix im = Matrix::Zero(n, n), iw = Matrix::Zero(n, n), nm = Matrix::Zero(n, n), nw = Matrix::Zero(n, n);
        int ni = 0, nn = 0;
        for (const auto& p : r.phases) {
            if (p.important) {
                im += p.mask;
                iw += p.retained_abs;
                ++ni;
            } else {
                nm += p.mask;
                nw += p.retained_abs;
                ++nn;
            }
        }
        if (ni) {
            g.important_mask += im / ni;
            g.important_weight += iw / ni;
            ++g.important_subjects;
        }
        if (nn) {
            g.nonimportant_mask += nm / nn;
            g.nonimportant_weight += nw / nn;
            ++g.nonimportant_subjects;
        }
    }
    if (g.important_subjects) {
        g.important_mask /= g.important_subjects;
        g.important_weight /= g.important_subjects;
    }
    if (g.nonimportant_subjects) {
        g.nonimportant_mask /= g.nonimportant_subjects;
        g.nonimportant_weight /= g.nonimportant_subjects;
    }
    return g;
}

// AUROC of planted edges against all other upper-triangle edges, scored by w.
inline double edge_auroc(const Matrix& w, const std::vector<RoiPair>& planted) {
    std::set<std::pair<int, int>> pos;
    for (const auto& p : planted) pos.insert({std::min(p.i, p.j), std::max(p.i, p.j)});
    std::vector<double> scores;
    std::vector<int> labels;
    for (Index i = 0; i < w.rows(); ++i)
        for (Index j = i + 1; j < w.cols(); ++j) {
            scores.push_back(w(i, j));
            labels.push_back(pos.count({static_cast<int>(i), static_cast<int>(j)}) ? 1 : 0);
        }
    return auc_score(scores, labels);
}

// ---------------------------------------------------------------- export

inline Json record_json(const InterpretabilityRecord& r) {
    Json phases = Json::array();
    for (const auto& p : r.phases) {
        Json edges = Json::array();
        for (const auto& e : p.edges) edges.push_back({e.i, e.j, round9(e.weight)});
        phases.push_back(Json{{"c_prev", p.c_prev},
                              {"c_cur", p.c_cur},
                              {"importance", round9(p.importance)},
                              {"important", p.important},
                              {"retained_ratio", round9(p.retained_ratio)},
                              {"retained_edges", edges}});
    }
    Json strength = Json::array();
    for (Index p = 0; p < r.subnetwork_strength.rows(); ++p) {
        Json row = Json::array();
        for (Index c = 0; c < r.subnetwork_strength.cols(); ++c) row.push_back(round9(r.subnetwork_strength(p, c)));
        strength.push_back(row);
    }
    return Json{{"format_version", kFormatVersion},
                {"kind", "interpretability_record"},
                {"subject_id", r.subject_id},
                {"label", r.label},
                {"n_rois", r.n_rois},
                {"phases", phases},
                {"subnetwork_pairs", r.subnetwork_pairs},
                {"subnetwork_strength", strength},
                {"subnetwork_normalization", "per-subject maximum over phases and subnetwork pairs"}};
}

// Parses a record file and checks its invariants, including that each R_t is
// exactly the retained-edge count over N(N-1)/2.
inline void validate_record_json(const Json& j, const std::string& what) {
    try {
        if (j.at("kind").get<std::string>() != "interpretability_record") throw SchemaError(what + ": wrong kind");
        const long n = j.at("n_rois").get<long>();
        double alpha_sum = 0.0;
        for (const auto& p : j.at("phases")) {
            const double r = p.at("retained_ratio").get<double>();
            if (!(r >= 0.0 && r <= 1.0)) throw SchemaError(what + ": retained_ratio outside [0, 1]");
            const double recomputed =
                static_cast<double>(p.at("retained_edges").size()) / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
            if (round9(recomputed) != r) throw SchemaError(what + ": retained_ratio disagrees with the edge list");
            alpha_sum += p.at("importance").get<double>();
            for (const auto& e : p.at("retained_edges")) {
                const long a = e.at(0).get<long>(), b = e.at(1).get<long>();
                if (!(0 <= a && a < b && b < n)) throw SchemaError(what + ": edge index out of range");
            }
        }
        if (std::abs(alpha_sum - 1.0) > 1e-6) throw SchemaError(what + ": importance weights do not sum to 1");
        for (const auto& row : j.at("subnetwork_strength"))
            for (const auto& v : row)
                if (!(v.get<double>() >= 0.0 && v.get<double>() <= 1.0)) throw SchemaError(what + ": strength outside [0, 1]");
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(what + ": " + e.what());
    }
}

// Edge list "i,j,mask_mean,retained_weight_mean" over the upper triangle.
inline std::string group_edges_csv(const Matrix& mask, const Matrix& weight) {
    std::string out = "i,j,mask_mean,retained_weight_mean\n";
    for (Index i = 0; i < mask.rows(); ++i)
        for (Index j = i + 1; j < mask.cols(); ++j)
            out += std::to_string(i) + "," + std::to_string(j) + "," + fmt9(mask(i, j)) + "," + fmt9(weight(i, j)) + "\n";
    return out;
}

inline std::pair<Matrix, Matrix> parse_group_edges_csv(const std::string& text, Index n, const std::string& where) {
    Matrix mask = Matrix::Zero(n, n), weight = Matrix::Zero(n, n);
    std::istringstream in(text);
    std::string line;
    long lineno = 0, rows = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1) {
            if (line != "i,j,mask_mean,retained_weight_mean") throw SchemaError(where + ":1: unexpected header");
            continue;
        }
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string a, b, c, d;
        if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c, ',') || !std::getline(ls, d))
            throw SchemaError(where + ":" + std::to_string(lineno) + ": expected 4 fields");
        try {
            const Index i = std::stol(a), j = std::stol(b);
            if (!(0 <= i && i < j && j < n)) throw std::out_of_range("edge");
            mask(i, j) = mask(j, i) = std::stod(c);
            weight(i, j) = weight(j, i) = std::stod(d);
        } catch (const std::exception&) {
            throw SchemaError(where + ":" + std::to_string(lineno) + ": malformed row");
        }
        ++rows;
    }
    if (rows != n * (n - 1) / 2) throw SchemaError(where + ": expected " + std::to_string(n * (n - 1) / 2) + " edges");
    return {mask, weight};
}

struct ExplainSummary {
    std::vector<InterpretabilityRecord> records;
    GroupMaps all;
    std::map<int, GroupMaps> by_label;
};

// Writes records/<id>.json and group_{important,nonimportant}[_label<k>].csv.
inline ExplainSummary export_explanations(const fs::path& out, const std::vector<InterpretabilityRecord>& recs) {
    ExplainSummary s;
    s.records = recs;
    for (const auto& r : recs) write_json(out / "records" / (r.subject_id + ".json"), record_json(r));
    s.all = aggregate_group(recs);
    write_text(out / "group_important.csv", group_edges_csv(s.all.important_mask, s.all.important_weight));
    write_text(out / "group_nonimportant.csv", group_edges_csv(s.all.nonimportant_mask, s.all.nonimportant_weight));
    std::set<int> labels;
    for (const auto& r : recs) labels.insert(r.label);
    for (int l : labels) {
        s.by_label[l] = aggregate_group(recs, l);
        const std::string suffix = "_label" + std::to_string(l) + ".csv";
        write_text(out / ("group_important" + suffix), group_edges_csv(s.by_label[l].important_mask, s.by_label[l].important_weight));
        write_text(out / ("group_nonimportant" + suffix),
                   group_edges_csv(s.by_label[l].nonimportant_mask, s.by_label[l].nonimportant_weight));
    }
    return s;
}

} // namespace brainstr
