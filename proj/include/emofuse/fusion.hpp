#pragma once

// Fusion stage: per-channel EEG tokenization, sequence assembly with CLS,
// modal-type and position embeddings, a transformer classifier head, the
// valence/arousal label schemes, and the concatenation fusion baseline.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "emofuse/eeg.hpp"
#include "emofuse/tensor.hpp"
#include "emofuse/vision.hpp"

namespace emofuse::fusion {

// ---------------------------------------------------------------------------
// Label schemes
// ---------------------------------------------------------------------------

enum class LabelScheme { Deap2Arousal, Deap2Valence, Deap3Arousal, Deap3Valence, Deap4 };

int n_classes(LabelScheme scheme);
const std::vector<std::string>& class_names(LabelScheme scheme);
std::string scheme_name(LabelScheme scheme);
LabelScheme scheme_from_name(const std::string& name);

// Maps 1-9 valence/arousal ratings to a class index. Quadrants for the
// 4-class scheme (thresholds inclusive on >= 5); per-dimension bins
// [1,4) / [4,7) / [7,9] for 3-class; high iff score >= 5 for 2-class.
int map_label(double arousal, double valence, LabelScheme scheme);

// ---------------------------------------------------------------------------
// EEG tokenizer: shared per-channel map, samples -> mid -> D with tanh
// ---------------------------------------------------------------------------

struct EEGTokenizerParams {
    diff::Parameter w1, b1, w2, b2;

    static EEGTokenizerParams init(int samples, int mid, int dim, std::mt19937_64& rng,
                                   const std::string& prefix);
    std::vector<diff::Parameter*> all() { return {&w1, &b1, &w2, &b2}; }
    int samples() const { return w1.tensor.rows(); }
    int dim() const { return w2.tensor.cols(); }
};

// One token per channel: (channels, samples) -> (channels, D).
diff::Tensor tokenize_eeg(const eeg::EEGSegment& segment, const EEGTokenizerParams& params);

// ---------------------------------------------------------------------------
// Fusion transformer
// ---------------------------------------------------------------------------

struct FusionBlockParams {
    diff::Parameter ln1_g, ln1_b;
    vision::AttentionParams attn;
    diff::Parameter wo, bo;
    diff::Parameter ln2_g, ln2_b;
    diff::Parameter w1, b1, w2, b2;
};

struct FusionParams {
    diff::Parameter modal_type;  // (3, D): rows CLS, EEG, VIS
    diff::Parameter pos_eeg;     // (T_eeg, D)
    diff::Parameter pos_vis;     // (T_vis, D)
    diff::Parameter cls;         // (1, D)
    std::vector<FusionBlockParams> blocks;
    diff::Parameter lnf_g, lnf_b;
    diff::Parameter head_w, head_b;  // (D, n_classes)

    static FusionParams init(int dim, int eeg_tokens, int vis_tokens, int depth, int heads,
                             int mlp_ratio, int classes, std::mt19937_64& rng,
                             const std::string& prefix);
    std::vector<diff::Parameter*> all();
    int dim() const { return cls.tensor.cols(); }
};

// [CLS] (+) eeg (+) vis with modal-type embeddings on every token and
// position embeddings on the modality tokens; the CLS token carries only
// its type embedding. Either modality may be absent.
diff::Tensor assemble(const std::optional<diff::Tensor>& eeg_tokens,
                      const std::optional<diff::Tensor>& vis_tokens,
                      const FusionParams& params);

// Pre-layernorm encoder stack; the classification head reads the CLS row
// only. Returns (1, n_classes) logits.
diff::Tensor classify(const diff::Tensor& sequence, const FusionParams& params);

// Eq.-style loss over a batch of logit rows; delegates to cross_entropy.
diff::Tensor loss(const diff::Tensor& logits, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Concatenation fusion baseline
// ---------------------------------------------------------------------------

struct ConcatHeadParams {
    diff::Parameter w1, b1, w2, b2;  // (2D, H), (H, n_classes)

    static ConcatHeadParams init(int dim, int hidden, int classes, std::mt19937_64& rng,
                                 const std::string& prefix);
    std::vector<diff::Parameter*> all() { return {&w1, &b1, &w2, &b2}; }
};

// Mean-pool each modality, concatenate, two-layer classifier.
diff::Tensor fuse_baseline_concat(const diff::Tensor& eeg_tokens, const diff::Tensor& vis_tokens,
                                  const ConcatHeadParams& params);

}  // namespace emofuse::fusion
