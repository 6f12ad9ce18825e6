#include "emofuse/fusion.hpp"

#include <stdexcept>

namespace emofuse::fusion {

using diff::Parameter;
using diff::Tensor;

// ---------------------------------------------------------------------------
// Label schemes
// ---------------------------------------------------------------------------

int n_classes(LabelScheme scheme) {
    switch (scheme) {
        case LabelScheme::Deap2Arousal:
        case LabelScheme::Deap2Valence:
            return 2;
        case LabelScheme::Deap3Arousal:
        case LabelScheme::Deap3Valence:
            return 3;
        case LabelScheme::Deap4:
            return 4;
    }
    throw std::logic_error("unknown scheme");
}

const std::vector<std::string>& class_names(LabelScheme scheme) {
    static const std::vector<std::string> two{"low", "high"};
    static const std::vector<std::string> three{"low", "medium", "high"};
    static const std::vector<std::string> four{"HAHV", "HALV", "LAHV", "LALV"};
    switch (scheme) {
        case LabelScheme::Deap2Arousal:
        case LabelScheme::Deap2Valence:
            return two;
        case LabelScheme::Deap3Arousal:
        case LabelScheme::Deap3Valence:
            return three;
        case LabelScheme::Deap4:
            return four;
    }
    throw std::logic_error("unknown scheme");
}

std::string scheme_name(LabelScheme scheme) {
    switch (scheme) {
        case LabelScheme::Deap2Arousal: return "deap2-arousal";
        case LabelScheme::Deap2Valence: return "deap2-valence";
        case LabelScheme::Deap3Arousal: return "deap3-arousal";
        case LabelScheme::Deap3Valence: return "deap3-valence";
        case LabelScheme::Deap4: return "deap4";
    }
    throw std::logic_error("unknown scheme");
}

LabelScheme scheme_from_name(const std::string& name) {
    if (name == "deap2-arousal") return LabelScheme::Deap2Arousal;
    if (name == "deap2-valence") return LabelScheme::Deap2Valence;
    if (name == "deap3-arousal") return LabelScheme::Deap3Arousal;
    if (name == "deap3-valence") return LabelScheme::Deap3Valence;
    if (name == "deap4") return LabelScheme::Deap4;
    throw std::invalid_argument("unknown label scheme '" + name + "'");
}

namespace {

int three_bin(double score) {
    if (score < 4.0) return 0;
    if (score < 7.0) return 1;
    return 2;
}

}  // namespace

int map_label(double arousal, double valence, LabelScheme scheme) {
    if (!(arousal >= 1.0 && arousal <= 9.0 && valence >= 1.0 && valence <= 9.0))
        throw std::invalid_argument("map_label: ratings must lie in [1, 9]");
    switch (scheme) {
        case LabelScheme::Deap2Arousal:
            return arousal >= 5.0 ? 1 : 0;
        case LabelScheme::Deap2Valence:
            return valence >= 5.0 ? 1 : 0;
        case LabelScheme::Deap3Arousal:
            return three_bin(arousal);
        case LabelScheme::Deap3Valence:
            return three_bin(valence);
        case LabelScheme::Deap4:
            if (arousal >= 5.0) return valence >= 5.0 ? 0 : 1;  // HAHV / HALV
            return valence >= 5.0 ? 2 : 3;                      // LAHV / LALV
    }
    throw std::logic_error("unknown scheme");
}

// ---------------------------------------------------------------------------
// EEG tokenizer
// ---------------------------------------------------------------------------

EEGTokenizerParams EEGTokenizerParams::init(int samples, int mid, int dim, std::mt19937_64& rng,
                                            const std::string& prefix) {
    if (samples < 1 || mid < 1 || dim < 1)
        throw std::invalid_argument("eeg tokenizer: dims must be positive");
    EEGTokenizerParams p;
    p.w1 = Parameter(prefix + ".w1", Tensor::randn({samples, mid}, rng, 0.02));
    p.b1 = Parameter(prefix + ".b1", Tensor::zeros({1, mid}));
    p.w2 = Parameter(prefix + ".w2", Tensor::randn({mid, dim}, rng, 0.02));
    p.b2 = Parameter(prefix + ".b2", Tensor::zeros({1, dim}));
    return p;
}

Tensor tokenize_eeg(const eeg::EEGSegment& segment, const EEGTokenizerParams& params) {
    const int channels = static_cast<int>(segment.data.rows());
    const int samples = static_cast<int>(segment.data.cols());
    if (samples != params.samples())
        throw diff::ShapeError("tokenize_eeg: segment has " + std::to_string(samples) +
                               " samples, tokenizer expects " +
                               std::to_string(params.samples()));

    diff::Buffer flat(static_cast<size_t>(channels) * samples);
    for (int c = 0; c < channels; ++c)
        for (int s = 0; s < samples; ++s)
            flat[static_cast<size_t>(c) * samples + s] = segment.data(c, s);
    Tensor x(diff::Shape{channels, samples}, std::move(flat));

    Tensor h = diff::tanh(diff::add(diff::matmul(x, params.w1.tensor), params.b1.tensor));
    return diff::add(diff::matmul(h, params.w2.tensor), params.b2.tensor);
}

// ---------------------------------------------------------------------------
// Fusion transformer
// ---------------------------------------------------------------------------

namespace {

Parameter weight(const std::string& name, int rows, int cols, std::mt19937_64& rng) {
    return Parameter(name, Tensor::randn({rows, cols}, rng, 0.02));
}

Parameter zeros_p(const std::string& name, int rows, int cols) {
    return Parameter(name, Tensor::zeros({rows, cols}));
}

Parameter ones_p(const std::string& name, int cols) {
    return Parameter(name, Tensor::full({1, cols}, 1.0));
}

}  // namespace

FusionParams FusionParams::init(int dim, int eeg_tokens, int vis_tokens, int depth, int heads,
                                int mlp_ratio, int classes, std::mt19937_64& rng,
                                const std::string& prefix) {
    if (dim % heads != 0)
        throw std::invalid_argument("fusion: dim not divisible by heads");
    if (depth < 1 || classes < 2 || eeg_tokens < 1 || vis_tokens < 1)
        throw std::invalid_argument("fusion: bad dimensions");
    FusionParams p;
    p.modal_type = weight(prefix + ".modal_type", 3, dim, rng);
    p.pos_eeg = weight(prefix + ".pos_eeg", eeg_tokens, dim, rng);
    p.pos_vis = weight(prefix + ".pos_vis", vis_tokens, dim, rng);
    p.cls = weight(prefix + ".cls", 1, dim, rng);
    for (int b = 0; b < depth; ++b) {
        FusionBlockParams blk;
        const std::string bp = prefix + ".blk" + std::to_string(b);
        blk.ln1_g = ones_p(bp + ".ln1.g", dim);
        blk.ln1_b = zeros_p(bp + ".ln1.b", 1, dim);
        blk.attn.wqkv = weight(bp + ".attn.wqkv", dim, 3 * dim, rng);
        blk.attn.bqkv = zeros_p(bp + ".attn.bqkv", 1, 3 * dim);
        blk.attn.num_heads = heads;
        blk.wo = weight(bp + ".attn.wo", dim, dim, rng);
        blk.bo = zeros_p(bp + ".attn.bo", 1, dim);
        blk.ln2_g = ones_p(bp + ".ln2.g", dim);
        blk.ln2_b = zeros_p(bp + ".ln2.b", 1, dim);
        blk.w1 = weight(bp + ".mlp.w1", dim, mlp_ratio * dim, rng);
        blk.b1 = zeros_p(bp + ".mlp.b1", 1, mlp_ratio * dim);
        blk.w2 = weight(bp + ".mlp.w2", mlp_ratio * dim, dim, rng);
        blk.b2 = zeros_p(bp + ".mlp.b2", 1, dim);
        p.blocks.push_back(std::move(blk));
    }
    p.lnf_g = ones_p(prefix + ".lnf.g", dim);
    p.lnf_b = zeros_p(prefix + ".lnf.b", 1, dim);
    p.head_w = weight(prefix + ".head.w", dim, classes, rng);
    p.head_b = zeros_p(prefix + ".head.b", 1, classes);
    return p;
}

std::vector<Parameter*> FusionParams::all() {
    std::vector<Parameter*> out{&modal_type, &pos_eeg, &pos_vis, &cls};
    for (auto& b : blocks)
        for (Parameter* p : {&b.ln1_g, &b.ln1_b, &b.attn.wqkv, &b.attn.bqkv, &b.wo, &b.bo,
                             &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2})
            out.push_back(p);
    for (Parameter* p : {&lnf_g, &lnf_b, &head_w, &head_b}) out.push_back(p);
    return out;
}

Tensor assemble(const std::optional<Tensor>& eeg_tokens, const std::optional<Tensor>& vis_tokens,
                const FusionParams& params) {
    if (!eeg_tokens && !vis_tokens)
        throw std::invalid_argument("assemble: need at least one modality");

    std::vector<Tensor> content{params.cls.tensor};
    std::vector<Tensor> additive{diff::gather_rows(params.modal_type.tensor, {0})};

    if (eeg_tokens) {
        const int t = eeg_tokens->rows();
        if (t != params.pos_eeg.tensor.rows())
            throw std::invalid_argument("assemble: " + std::to_string(t) +
                                        " EEG tokens vs position table of " +
                                        std::to_string(params.pos_eeg.tensor.rows()));
        content.push_back(*eeg_tokens);
        additive.push_back(diff::add(
            diff::gather_rows(params.modal_type.tensor, std::vector<int>(t, 1)),
            params.pos_eeg.tensor));
    }
    if (vis_tokens) {
        const int t = vis_tokens->rows();
        if (t != params.pos_vis.tensor.rows())
            throw std::invalid_argument("assemble: " + std::to_string(t) +
                                        " visual tokens vs position table of " +
                                        std::to_string(params.pos_vis.tensor.rows()));
        content.push_back(*vis_tokens);
        additive.push_back(diff::add(
            diff::gather_rows(params.modal_type.tensor, std::vector<int>(t, 2)),
            params.pos_vis.tensor));
    }
    return diff::add(diff::concat_rows(content), diff::concat_rows(additive));
}

namespace {

Tensor fusion_block(const Tensor& x, const FusionBlockParams& blk) {
    Tensor h = diff::layernorm(x, blk.ln1_g.tensor, blk.ln1_b.tensor);
    Tensor attended = vision::window_attention(h, blk.attn);
    Tensor y = diff::add(x, diff::add(diff::matmul(attended, blk.wo.tensor), blk.bo.tensor));
    Tensor m = diff::layernorm(y, blk.ln2_g.tensor, blk.ln2_b.tensor);
    Tensor mlp = diff::add(
        diff::matmul(diff::gelu(diff::add(diff::matmul(m, blk.w1.tensor), blk.b1.tensor)),
                     blk.w2.tensor),
        blk.b2.tensor);
    return diff::add(y, mlp);
}

}  // namespace

Tensor classify(const Tensor& sequence, const FusionParams& params) {
    Tensor x = sequence;
    for (const auto& blk : params.blocks) x = fusion_block(x, blk);
    x = diff::layernorm(x, params.lnf_g.tensor, params.lnf_b.tensor);
    Tensor cls_out = diff::slice_rows(x, 0, 1);
    return diff::add(diff::matmul(cls_out, params.head_w.tensor), params.head_b.tensor);
}

Tensor loss(const Tensor& logits, const std::vector<int>& labels) {
    return diff::cross_entropy(logits, labels);
}

// ---------------------------------------------------------------------------
// Concatenation baseline
// ---------------------------------------------------------------------------

ConcatHeadParams ConcatHeadParams::init(int dim, int hidden, int classes, std::mt19937_64& rng,
                                        const std::string& prefix) {
    ConcatHeadParams p;
    p.w1 = weight(prefix + ".w1", 2 * dim, hidden, rng);
    p.b1 = zeros_p(prefix + ".b1", 1, hidden);
    p.w2 = weight(prefix + ".w2", hidden, classes, rng);
    p.b2 = zeros_p(prefix + ".b2", 1, classes);
    return p;
}

Tensor fuse_baseline_concat(const Tensor& eeg_tokens, const Tensor& vis_tokens,
                            const ConcatHeadParams& params) {
    Tensor pooled =
        diff::concat_cols({diff::mean_rows(eeg_tokens), diff::mean_rows(vis_tokens)});
    Tensor h = diff::relu(diff::add(diff::matmul(pooled, params.w1.tensor), params.b1.tensor));
    return diff::add(diff::matmul(h, params.w2.tensor), params.b2.tensor);
}

}  // namespace emofuse::fusion
