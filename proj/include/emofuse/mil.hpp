#pragma once

// Attention-based multiple instance learning over a bag of frame token
// grids: gated-tanh attention scores per instance, hard top-K selection,
// and weight-scaled forwarding so the scorer stays trainable end to end.

#include <random>
#include <string>
#include <vector>

#include "emofuse/tensor.hpp"

namespace emofuse::mil {

struct InstanceBag {
    std::vector<diff::Tensor> token_grids;  // q grids, each (M, D)
    diff::Tensor pooled;                    // (q, D): per-instance token mean, on tape

    int size() const { return static_cast<int>(token_grids.size()); }
};

// pooled row i is the token mean of grids[i]; gradients flow back into them.
InstanceBag make_bag(const std::vector<diff::Tensor>& grids);

struct MILParams {
    diff::Parameter v;  // (L, M_pool)
    diff::Parameter w;  // (L, 1)

    static MILParams init(int hidden, int feature_dim, std::mt19937_64& rng,
                          const std::string& prefix);
    std::vector<diff::Parameter*> all() { return {&v, &w}; }
};

// Pre-softmax gate values w^T tanh(V x_q^T), shape (1, q).
diff::Tensor attention_logits(const InstanceBag& bag, const MILParams& params);

// Softmax-normalized instance weights, shape (1, q): positive, sum 1.
diff::Tensor attention_scores(const InstanceBag& bag, const MILParams& params);

struct Selection {
    std::vector<int> indices;                   // descending by score, ties to lower index
    diff::Tensor weights;                       // (1, K) renormalized to sum 1, on tape
    std::vector<diff::Tensor> selected_tokens;  // K grids
};

Selection select_topk(const InstanceBag& bag, const diff::Tensor& scores, int k);

// Each selected grid scaled by K times its renormalized weight, so uniform
// weights leave the grids unchanged.
std::vector<diff::Tensor> weighted_forward(const Selection& sel);

}  // namespace emofuse::mil
