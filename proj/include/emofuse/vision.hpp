#pragma once

// Windowed-attention image encoder. Frames are patchified, projected to
// embed_dim with a learned absolute position table, then run through an
// even number of attention blocks alternating regular and shifted windows.
// Output is a grid of M tokens per frame.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "emofuse/tensor.hpp"

namespace emofuse::vision {

struct Frame {
    int height = 0;
    int width = 0;
    int channels = 1;  // 1 or 3
    int frame_index = 0;
    std::vector<double> pixels;  // H*W*C row-major, values in [0,1]

    double at(int r, int c, int ch) const {
        return pixels[(static_cast<size_t>(r) * width + c) * channels + ch];
    }
};

struct EncoderConfig {
    int image_size = 56;
    int patch_size = 8;
    int in_channels = 1;
    int embed_dim = 64;   // D
    int depth = 6;        // even: regular/shifted pairs
    int window_size = 7;
    int num_heads = 4;
    int merge_stages = 0;  // each stage halves the grid side and doubles D
    int mlp_ratio = 4;

    void validate() const;
    int grid_side() const { return image_size / patch_size; }
    int tokens() const { return grid_side() * grid_side(); }  // before merging
    int out_tokens() const { return tokens() >> (2 * merge_stages); }
    int out_dim() const { return embed_dim << merge_stages; }
};

struct TokenGrid {
    diff::Tensor tokens;  // (M, D)
    int grid_h = 0;
    int grid_w = 0;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct AttentionParams {
    diff::Parameter wqkv;  // (D, 3D)
    diff::Parameter bqkv;  // (1, 3D)
    int num_heads = 1;
};

struct EncoderBlockParams {
    diff::Parameter ln1_g, ln1_b;
    AttentionParams attn;
    diff::Parameter wo, bo;  // output projection after window attention
    diff::Parameter ln2_g, ln2_b;
    diff::Parameter w1, b1, w2, b2;  // MLP
};

struct PatchMergeParams {
    diff::Parameter ln_g, ln_b;  // over 4D
    diff::Parameter w;           // (4D, 2D)
};

struct EncoderParams {
    diff::Parameter patch_w;  // (patch*patch*C, D)
    diff::Parameter patch_b;  // (1, D)
    diff::Parameter pos;      // (M, D) learned absolute positions
    std::vector<EncoderBlockParams> blocks;
    std::vector<PatchMergeParams> merges;  // merge_stages entries
    diff::Parameter lnf_g, lnf_b;

    static EncoderParams init(const EncoderConfig& cfg, std::mt19937_64& rng,
                              const std::string& prefix);
    std::vector<diff::Parameter*> all();
};

// ---------------------------------------------------------------------------
// Window bookkeeping (pure index math)
// ---------------------------------------------------------------------------

// Token index lists per window after a cyclic roll by `shift`. Indices refer
// to rows of the (grid_h*grid_w, D) token matrix.
std::vector<std::vector<int>> window_index_lists(int grid_h, int grid_w, int window_size,
                                                 int shift);

// Additive (0 / -inf) masks for a shifted layer, one (w^2, w^2) tensor per
// window; tokens from different pre-shift windows never see each other.
std::vector<diff::Tensor> shifted_window_masks(int grid_h, int grid_w, int window_size,
                                               int shift);

// Partition a token grid into per-window token matrices; reverse restores
// the original grid exactly. `shift` rolls the grid cyclically first.
std::vector<diff::Tensor> window_partition(const TokenGrid& grid, int window_size,
                                           int shift = 0);
diff::Tensor window_reverse(const std::vector<diff::Tensor>& windows, int grid_h, int grid_w,
                            int window_size, int shift = 0);

// ---------------------------------------------------------------------------
// Attention and encoding
// ---------------------------------------------------------------------------

// Multi-head self-attention over one window's tokens (no output projection:
// returns the attended value heads, concatenated). A single-token window
// therefore returns exactly its own value projection. When `probs_out` is
// given, the per-head attention matrices are appended to it.
diff::Tensor window_attention(const diff::Tensor& window_tokens, const AttentionParams& params,
                              const diff::Tensor* mask = nullptr,
                              std::vector<diff::Tensor>* probs_out = nullptr);

TokenGrid patch_embed(const Frame& frame, const EncoderConfig& cfg, const EncoderParams& params);

TokenGrid encode_frame(const Frame& frame, const EncoderConfig& cfg, const EncoderParams& params);

// Same computation for a whole bag of frames with the projections and MLPs
// batched into single matmuls. Matches encode_frame to rounding error.
std::vector<TokenGrid> encode_bag(const std::vector<Frame>& frames, const EncoderConfig& cfg,
                                  const EncoderParams& params);

}  // namespace emofuse::vision
