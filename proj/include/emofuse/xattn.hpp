#pragma once

// Cross-attention token compressor: N learnable queries attend over the M
// visual tokens and emit exactly N tokens, decoupling the fusion sequence
// length from the frame count.

#include <random>
#include <string>
#include <vector>

#include "emofuse/tensor.hpp"

namespace emofuse::xattn {

struct QueryBank {
    diff::Parameter queries;  // (N, D)

    static QueryBank init(int n_queries, int dim, std::mt19937_64& rng,
                          const std::string& prefix);
    int size() const { return queries.tensor.rows(); }
};

struct CompressorParams {
    diff::Parameter wq, wk, wv;  // (D, D), no biases
    int num_heads = 1;

    static CompressorParams init(int dim, int num_heads, std::mt19937_64& rng,
                                 const std::string& prefix);
    std::vector<diff::Parameter*> all() { return {&wq, &wk, &wv}; }
};

// Q = X_q W_Q, K = X_v W_K, V = X_v W_V; softmax(Q K^T / sqrt(d_k)) V.
// Output is (N, D) for any M >= 1. Per-head attention matrices are appended
// to `probs_out` when given.
diff::Tensor compress(const diff::Tensor& visual_tokens, const QueryBank& bank,
                      const CompressorParams& params,
                      std::vector<diff::Tensor>* probs_out = nullptr);

}  // namespace emofuse::xattn
