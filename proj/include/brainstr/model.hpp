#pragma once

// The trainable classifier stack: structure generator, shared encoder and
// attention/classifier, plus batched forward passes over phase partitions.

#include <cstdint>
#include <vector>

#include "autodiff.hpp"
#include "encoder.hpp"
#include "errors.hpp"
#include "objective.hpp"
#include "segfc.hpp"
#include "structgen.hpp"
#include "synthgen.hpp"

namespace brainstr {

struct ModelConfig {
    StructGenConfig structgen;
    EncoderConfig encoder;
    AttentionConfig attention;

    // Propagates N and d so the three parts agree.
    void set_n_rois(int n) {
        structgen.n_rois = n;
        encoder.n_rois = n;
    }

    void validate() const {
        structgen.validate();
        encoder.validate();
        attention.validate();
        if (structgen.n_rois != encoder.n_rois) throw ConfigError("model: structgen and encoder disagree on N");
        if (attention.embed_dim != encoder.embed_dim) throw ConfigError("model: attention and encoder disagree on d");
    }
};

class BrainStrModel {
public:
    BrainStrModel() = default;
    BrainStrModel(ModelConfig cfg, std::uint64_t seed)
        : structgen((cfg.validate(), cfg.structgen), synth_detail::splitmix64(seed ^ 0x5151ULL)),
          encoder(cfg.encoder, synth_detail::splitmix64(seed ^ 0xE4C0ULL)),
          attention(cfg.attention, synth_detail::splitmix64(seed ^ 0xA77EULL)),
          cfg_(cfg) {}

    const ModelConfig& config() const { return cfg_; }
    Index n_rois() const { return cfg_.encoder.n_rois; }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto* p : structgen.parameters()) out.push_back(p);
        for (auto* p : encoder.parameters()) out.push_back(p);
        for (auto* p : attention.parameters()) out.push_back(p);
        return out;
    }

    StructGenModel structgen;
    EncoderModel encoder;
    AttentionModel attention;

private:
    ModelConfig cfg_;
};

struct SubjectPass {
    StructureVars structures;
    PhaseEmbeddings embeddings;
    BundleVars bundle;
};

struct BatchPass {
    std::vector<SubjectPass> subjects;
    ad::Var logits;  // B x classes
    ad::Var h_pp;    // B x d
    ad::Var h_zero;  // B x d
    ad::Var h_minus; // B x d

    std::vector<std::vector<ad::Var>> continuous_structures() const {
        std::vector<std::vector<ad::Var>> out;
        for (const auto& s : subjects) out.push_back(s.structures.continuous);
        return out;
    }
};

// Model is BrainStrModel (trainable) or const BrainStrModel (frozen).
template <class Model>
SubjectPass forward_subject(ad::Tape& t, Model& model, const PhasePartition& part) {
    SubjectPass s;
    s.structures = evolve_structures(t, model.structgen, part);
    s.embeddings = encode_sequence(t, model.encoder, s.structures.positive, s.structures.negative,
                                   s.structures.original);
    s.bundle = attend_and_aggregate(t, model.attention, s.embeddings);
    return s;
}

template <class Model>
BatchPass forward_batch(ad::Tape& t, Model& model, const std::vector<const PhasePartition*>& parts) {
    if (parts.empty()) throw DimensionError("forward_batch: empty batch");
    BatchPass b;
    std::vector<ad::Var> pp, h0, hm;
    for (const PhasePartition* p : parts) {
        b.subjects.push_back(forward_subject(t, model, *p));
        pp.push_back(b.subjects.back().bundle.h_pp);
        h0.push_back(b.subjects.back().bundle.h_zero);
        hm.push_back(b.subjects.back().bundle.h_minus);
    }
    b.h_pp = ad::vcat(pp);
    b.h_zero = ad::vcat(h0);
    b.h_minus = ad::vcat(hm);
    b.logits = model.attention.logits(t, b.h_pp);
    return b;
}

template <class Model>
LossTerms batch_loss(ad::Tape& t, Model& model, const std::vector<const PhasePartition*>& parts,
                     const std::vector<int>& labels, const ContrastConfig& contrast, const StructRegWeights& reg,
                     BatchPass* pass_out = nullptr) {
    BatchPass pass = forward_batch(t, model, parts);
    LossTerms terms = total_loss(t, pass.logits, pass.h_pp, pass.h_zero, pass.h_minus, labels,
                                 pass.continuous_structures(), contrast, reg);
    if (pass_out) *pass_out = std::move(pass);
    return terms;
}

// Class-1 probability for every partition (frozen forward pass).
inline std::vector<double> predict_scores(const BrainStrModel& model, const std::vector<const PhasePartition*>& parts) {
    std::vector<double> out;
    for (const PhasePartition* p : parts) {
        ad::Tape t;
        BatchPass pass = forward_batch(t, model, {p});
        out.push_back(class_probabilities(pass.logits.value())(0, 1));
    }
    return out;
}

} // namespace brainstr
