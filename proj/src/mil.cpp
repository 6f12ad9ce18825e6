#include "emofuse/mil.hpp"

#include <stdexcept>

namespace emofuse::mil {

using diff::Tensor;

InstanceBag make_bag(const std::vector<Tensor>& grids) {
    if (grids.empty()) throw std::invalid_argument("make_bag: empty bag");
    InstanceBag bag;
    bag.token_grids = grids;
    std::vector<Tensor> means;
    means.reserve(grids.size());
    for (const Tensor& g : grids) means.push_back(diff::mean_rows(g));
    bag.pooled = diff::concat_rows(means);
    return bag;
}

MILParams MILParams::init(int hidden, int feature_dim, std::mt19937_64& rng,
                          const std::string& prefix) {
    if (hidden < 1 || feature_dim < 1)
        throw std::invalid_argument("mil: hidden and feature dims must be positive");
    MILParams p;
    p.v = diff::Parameter(prefix + ".v", Tensor::randn({hidden, feature_dim}, rng, 0.1));
    // zero gate: scores start exactly uniform, so early selection is not
    // biased toward any embedding cluster before the gate has a gradient
    p.w = diff::Parameter(prefix + ".w", Tensor::zeros({hidden, 1}));
    return p;
}

Tensor attention_logits(const InstanceBag& bag, const MILParams& params) {
    // w^T tanh(V X^T): (1,L) x (L,q) -> (1,q)
    Tensor gates = diff::tanh(diff::matmul(params.v.tensor, diff::transpose(bag.pooled)));
    return diff::matmul(diff::transpose(params.w.tensor), gates);
}

Tensor attention_scores(const InstanceBag& bag, const MILParams& params) {
    return diff::softmax_lastaxis(attention_logits(bag, params));
}

Selection select_topk(const InstanceBag& bag, const Tensor& scores, int k) {
    const int q = bag.size();
    if (k < 1 || k > q)
        throw std::invalid_argument("select_topk: K=" + std::to_string(k) + " outside [1," +
                                    std::to_string(q) + "]");
    if (static_cast<int>(scores.numel()) != q)
        throw std::invalid_argument("select_topk: score/bag size mismatch");

    Selection sel;
    sel.indices = diff::topk_indices(scores, k);
    Tensor picked = diff::transpose(diff::gather_rows(diff::transpose(scores), sel.indices));
    sel.weights = diff::div(picked, diff::sum_all(picked));
    sel.selected_tokens.reserve(static_cast<size_t>(k));
    for (int idx : sel.indices) sel.selected_tokens.push_back(bag.token_grids[idx]);
    return sel;
}

std::vector<Tensor> weighted_forward(const Selection& sel) {
    const int k = static_cast<int>(sel.indices.size());
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        Tensor wi = diff::scale(diff::slice_cols(sel.weights, i, 1), static_cast<double>(k));
        out.push_back(diff::mul(sel.selected_tokens[i], wi));
    }
    return out;
}

}  // namespace emofuse::mil
