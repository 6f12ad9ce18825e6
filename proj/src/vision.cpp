#include "emofuse/vision.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace emofuse::vision {

using diff::Parameter;
using diff::Tensor;

void EncoderConfig::validate() const {
    if (in_channels != 1 && in_channels != 3)
        throw std::invalid_argument("encoder: in_channels must be 1 or 3");
    if (patch_size < 1 || image_size < patch_size)
        throw std::invalid_argument("encoder: bad patch/image size");
    const int divisor = patch_size << merge_stages;
    if (image_size % divisor != 0)
        throw std::invalid_argument("encoder: image size " + std::to_string(image_size) +
                                    " not divisible by patch_size*2^merge_stages = " +
                                    std::to_string(divisor));
    if (depth < 2 || depth % 2 != 0)
        throw std::invalid_argument("encoder: depth must be even and >= 2");
    if (merge_stages < 0 || depth % (merge_stages + 1) != 0)
        throw std::invalid_argument("encoder: depth must split evenly across stages");
    if (embed_dim % num_heads != 0)
        throw std::invalid_argument("encoder: embed_dim not divisible by num_heads");
    for (int s = 0; s <= merge_stages; ++s) {
        const int side = grid_side() >> s;
        if (side < window_size || side % window_size != 0)
            throw std::invalid_argument("encoder: window_size " + std::to_string(window_size) +
                                        " does not divide stage-" + std::to_string(s) +
                                        " grid side " + std::to_string(side));
    }
    if (mlp_ratio < 1) throw std::invalid_argument("encoder: mlp_ratio must be >= 1");
}

// ---------------------------------------------------------------------------
// Parameters
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

EncoderParams EncoderParams::init(const EncoderConfig& cfg, std::mt19937_64& rng,
                                  const std::string& prefix) {
    cfg.validate();
    EncoderParams p;
    const int patch_dim = cfg.patch_size * cfg.patch_size * cfg.in_channels;
    p.patch_w = weight(prefix + ".patch.w", patch_dim, cfg.embed_dim, rng);
    p.patch_b = zeros_p(prefix + ".patch.b", 1, cfg.embed_dim);
    p.pos = weight(prefix + ".pos", cfg.tokens(), cfg.embed_dim, rng);

    const int per_stage = cfg.depth / (cfg.merge_stages + 1);
    int dim = cfg.embed_dim;
    for (int b = 0; b < cfg.depth; ++b) {
        if (b > 0 && b % per_stage == 0) {
            PatchMergeParams m;
            const std::string mp = prefix + ".merge" + std::to_string(b / per_stage - 1);
            m.ln_g = ones_p(mp + ".ln.g", 4 * dim);
            m.ln_b = zeros_p(mp + ".ln.b", 1, 4 * dim);
            m.w = weight(mp + ".w", 4 * dim, 2 * dim, rng);
            p.merges.push_back(std::move(m));
            dim *= 2;
        }
        EncoderBlockParams blk;
        const std::string bp = prefix + ".blk" + std::to_string(b);
        blk.ln1_g = ones_p(bp + ".ln1.g", dim);
        blk.ln1_b = zeros_p(bp + ".ln1.b", 1, dim);
        blk.attn.wqkv = weight(bp + ".attn.wqkv", dim, 3 * dim, rng);
        blk.attn.bqkv = zeros_p(bp + ".attn.bqkv", 1, 3 * dim);
        blk.attn.num_heads = cfg.num_heads;
        blk.wo = weight(bp + ".attn.wo", dim, dim, rng);
        blk.bo = zeros_p(bp + ".attn.bo", 1, dim);
        blk.ln2_g = ones_p(bp + ".ln2.g", dim);
        blk.ln2_b = zeros_p(bp + ".ln2.b", 1, dim);
        blk.w1 = weight(bp + ".mlp.w1", dim, cfg.mlp_ratio * dim, rng);
        blk.b1 = zeros_p(bp + ".mlp.b1", 1, cfg.mlp_ratio * dim);
        blk.w2 = weight(bp + ".mlp.w2", cfg.mlp_ratio * dim, dim, rng);
        blk.b2 = zeros_p(bp + ".mlp.b2", 1, dim);
        p.blocks.push_back(std::move(blk));
    }
    p.lnf_g = ones_p(prefix + ".lnf.g", dim);
    p.lnf_b = zeros_p(prefix + ".lnf.b", 1, dim);
    return p;
}

std::vector<Parameter*> EncoderParams::all() {
    std::vector<Parameter*> out{&patch_w, &patch_b, &pos};
    for (auto& b : blocks) {
        for (Parameter* p : {&b.ln1_g, &b.ln1_b, &b.attn.wqkv, &b.attn.bqkv, &b.wo, &b.bo,
                             &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2})
            out.push_back(p);
    }
    for (auto& m : merges)
        for (Parameter* p : {&m.ln_g, &m.ln_b, &m.w}) out.push_back(p);
    out.push_back(&lnf_g);
    out.push_back(&lnf_b);
    return out;
}

// ---------------------------------------------------------------------------
// Window bookkeeping
// ---------------------------------------------------------------------------

std::vector<std::vector<int>> window_index_lists(int grid_h, int grid_w, int window_size,
                                                 int shift) {
    if (grid_h % window_size != 0 || grid_w % window_size != 0)
        throw std::invalid_argument("window partition: window_size " +
                                    std::to_string(window_size) + " does not divide grid " +
                                    std::to_string(grid_h) + "x" + std::to_string(grid_w));
    const int wh = grid_h / window_size, ww = grid_w / window_size;
    std::vector<std::vector<int>> lists;
    lists.reserve(static_cast<size_t>(wh) * ww);
    for (int wr = 0; wr < wh; ++wr)
        for (int wc = 0; wc < ww; ++wc) {
            std::vector<int> idx;
            idx.reserve(static_cast<size_t>(window_size) * window_size);
            for (int i = 0; i < window_size; ++i)
                for (int j = 0; j < window_size; ++j) {
                    // rolled position -> original grid index
                    const int r = (wr * window_size + i + shift) % grid_h;
                    const int c = (wc * window_size + j + shift) % grid_w;
                    idx.push_back(r * grid_w + c);
                }
            lists.push_back(std::move(idx));
        }
    return lists;
}

std::vector<Tensor> shifted_window_masks(int grid_h, int grid_w, int window_size, int shift) {
    // Region ids in rolled coordinates: rows/cols that wrapped around the
    // image edge get their own band and may not attend across it.
    auto band = [&](int pos, int extent) {
        if (pos < extent - window_size) return 0;
        if (pos < extent - shift) return 1;
        return 2;
    };
    const int gh = grid_h, gw = grid_w;
    std::vector<int> id(static_cast<size_t>(gh) * gw);
    for (int r = 0; r < gh; ++r)
        for (int c = 0; c < gw; ++c)
            id[static_cast<size_t>(r) * gw + c] = 3 * band(r, gh) + band(c, gw);

    const double neg_inf = -std::numeric_limits<double>::infinity();
    const int t = window_size * window_size;
    std::vector<Tensor> masks;
    const int wh = gh / window_size, ww = gw / window_size;
    for (int wr = 0; wr < wh; ++wr)
        for (int wc = 0; wc < ww; ++wc) {
            diff::Buffer m(static_cast<size_t>(t) * t, 0.0);
            std::vector<int> ids(static_cast<size_t>(t));
            for (int i = 0; i < window_size; ++i)
                for (int j = 0; j < window_size; ++j)
                    ids[static_cast<size_t>(i) * window_size + j] =
                        id[static_cast<size_t>(wr * window_size + i) * gw + wc * window_size + j];
            for (int a = 0; a < t; ++a)
                for (int b = 0; b < t; ++b)
                    if (ids[a] != ids[b]) m[static_cast<size_t>(a) * t + b] = neg_inf;
            masks.emplace_back(diff::Shape{t, t}, std::move(m));
        }
    return masks;
}

std::vector<Tensor> window_partition(const TokenGrid& grid, int window_size, int shift) {
    const auto lists = window_index_lists(grid.grid_h, grid.grid_w, window_size, shift);
    std::vector<Tensor> windows;
    windows.reserve(lists.size());
    for (const auto& idx : lists) windows.push_back(diff::gather_rows(grid.tokens, idx));
    return windows;
}

Tensor window_reverse(const std::vector<Tensor>& windows, int grid_h, int grid_w,
                      int window_size, int shift) {
    const auto lists = window_index_lists(grid_h, grid_w, window_size, shift);
    if (lists.size() != windows.size())
        throw std::invalid_argument("window_reverse: window count mismatch");
    std::vector<int> inverse(static_cast<size_t>(grid_h) * grid_w);
    int pos = 0;
    for (const auto& idx : lists)
        for (int orig : idx) inverse[static_cast<size_t>(orig)] = pos++;
    return diff::gather_rows(diff::concat_rows(windows), inverse);
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

namespace {

// Attention over one window given its precomputed qkv rows (T, 3D).
Tensor attend_qkv(const Tensor& qkv, int dim, int num_heads, const Tensor* mask,
                  std::vector<Tensor>* probs_out) {
    const int dh = dim / num_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    auto head_attend = [&](const Tensor& q, const Tensor& k, const Tensor& v) {
        Tensor scores = diff::scale(diff::matmul(q, diff::transpose(k)), inv_sqrt);
        if (mask != nullptr) scores = diff::add(scores, *mask);
        Tensor probs = diff::softmax_lastaxis(scores);
        if (probs_out != nullptr) probs_out->push_back(probs);
        return diff::matmul(probs, v);
    };
    if (num_heads == 1) {
        return head_attend(diff::slice_cols(qkv, 0, dim), diff::slice_cols(qkv, dim, dim),
                           diff::slice_cols(qkv, 2 * dim, dim));
    }
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(num_heads));
    for (int h = 0; h < num_heads; ++h) {
        heads.push_back(head_attend(diff::slice_cols(qkv, h * dh, dh),
                                    diff::slice_cols(qkv, dim + h * dh, dh),
                                    diff::slice_cols(qkv, 2 * dim + h * dh, dh)));
    }
    return diff::concat_cols(heads);
}

Tensor mlp_block(const Tensor& x, const EncoderBlockParams& blk) {
    Tensor h = diff::gelu(diff::add(diff::matmul(x, blk.w1.tensor), blk.b1.tensor));
    return diff::add(diff::matmul(h, blk.w2.tensor), blk.b2.tensor);
}

}  // namespace

Tensor window_attention(const Tensor& window_tokens, const AttentionParams& params,
                        const Tensor* mask, std::vector<Tensor>* probs_out) {
    const int dim = window_tokens.cols();
    if (dim % params.num_heads != 0)
        throw std::invalid_argument("window_attention: dim not divisible by heads");
    Tensor qkv = diff::add(diff::matmul(window_tokens, params.wqkv.tensor), params.bqkv.tensor);
    return attend_qkv(qkv, dim, params.num_heads, mask, probs_out);
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

namespace {

diff::Buffer patch_matrix(const Frame& frame, const EncoderConfig& cfg) {
    if (frame.height != cfg.image_size || frame.width != cfg.image_size ||
        frame.channels != cfg.in_channels)
        throw std::invalid_argument("patch_embed: frame does not match encoder config");
    const int p = cfg.patch_size;
    const int side = cfg.grid_side();
    const int patch_dim = p * p * cfg.in_channels;
    diff::Buffer rows(static_cast<size_t>(side) * side * patch_dim);
    size_t at = 0;
    for (int pr = 0; pr < side; ++pr)
        for (int pc = 0; pc < side; ++pc)
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    for (int ch = 0; ch < cfg.in_channels; ++ch)
                        rows[at++] = frame.at(pr * p + dy, pc * p + dx, ch);
    return rows;
}

struct LayerPlan {
    int gh, gw, dim, shift;
    std::vector<std::vector<int>> lists;  // token indices per window
    std::vector<Tensor> masks;            // empty when shift == 0
};

std::vector<LayerPlan> layer_plans(const EncoderConfig& cfg) {
    std::vector<LayerPlan> plans;
    const int per_stage = cfg.depth / (cfg.merge_stages + 1);
    int side = cfg.grid_side();
    int dim = cfg.embed_dim;
    for (int b = 0; b < cfg.depth; ++b) {
        if (b > 0 && b % per_stage == 0) {
            side /= 2;
            dim *= 2;
        }
        LayerPlan plan;
        plan.gh = plan.gw = side;
        plan.dim = dim;
        plan.shift = (b % 2 == 1) ? cfg.window_size / 2 : 0;
        plan.lists = window_index_lists(side, side, cfg.window_size, plan.shift);
        if (plan.shift > 0)
            plan.masks = shifted_window_masks(side, side, cfg.window_size, plan.shift);
        plans.push_back(std::move(plan));
    }
    return plans;
}

// Interleaved row indices realizing a 2x2 patch merge via gather + reshape.
std::vector<int> merge_indices(int gh, int gw) {
    std::vector<int> idx;
    idx.reserve(static_cast<size_t>(gh) * gw);
    for (int r = 0; r < gh; r += 2)
        for (int c = 0; c < gw; c += 2) {
            idx.push_back(r * gw + c);
            idx.push_back(r * gw + c + 1);
            idx.push_back((r + 1) * gw + c);
            idx.push_back((r + 1) * gw + c + 1);
        }
    return idx;
}

}  // namespace

TokenGrid patch_embed(const Frame& frame, const EncoderConfig& cfg, const EncoderParams& params) {
    cfg.validate();
    const int side = cfg.grid_side();
    const int patch_dim = cfg.patch_size * cfg.patch_size * cfg.in_channels;
    Tensor patches(diff::Shape{side * side, patch_dim}, patch_matrix(frame, cfg));
    Tensor tokens = diff::add(
        diff::add(diff::matmul(patches, params.patch_w.tensor), params.patch_b.tensor),
        params.pos.tensor);
    return TokenGrid{tokens, side, side};
}

TokenGrid encode_frame(const Frame& frame, const EncoderConfig& cfg,
                       const EncoderParams& params) {
    TokenGrid grid = patch_embed(frame, cfg, params);
    const auto plans = layer_plans(cfg);
    const int per_stage = cfg.depth / (cfg.merge_stages + 1);

    Tensor x = grid.tokens;
    int gh = grid.grid_h, gw = grid.grid_w;
    for (int b = 0; b < cfg.depth; ++b) {
        if (b > 0 && b % per_stage == 0) {
            const PatchMergeParams& m = params.merges[b / per_stage - 1];
            Tensor grouped = diff::gather_rows(x, merge_indices(gh, gw));
            gh /= 2;
            gw /= 2;
            Tensor wide = diff::reshape(grouped, {gh * gw, 4 * plans[b - 1].dim});
            x = diff::matmul(diff::layernorm(wide, m.ln_g.tensor, m.ln_b.tensor), m.w.tensor);
        }
        const LayerPlan& plan = plans[b];
        const EncoderBlockParams& blk = params.blocks[b];

        Tensor h = diff::layernorm(x, blk.ln1_g.tensor, blk.ln1_b.tensor);
        std::vector<Tensor> attended;
        attended.reserve(plan.lists.size());
        for (size_t w = 0; w < plan.lists.size(); ++w) {
            Tensor win = diff::gather_rows(h, plan.lists[w]);
            const Tensor* mask = plan.shift > 0 ? &plan.masks[w] : nullptr;
            attended.push_back(window_attention(win, blk.attn, mask));
        }
        Tensor merged = window_reverse(attended, gh, gw, cfg.window_size, plan.shift);
        x = diff::add(x, diff::add(diff::matmul(merged, blk.wo.tensor), blk.bo.tensor));
        x = diff::add(x, mlp_block(diff::layernorm(x, blk.ln2_g.tensor, blk.ln2_b.tensor), blk));
    }
    Tensor out = diff::layernorm(x, params.lnf_g.tensor, params.lnf_b.tensor);
    return TokenGrid{out, gh, gw};
}

std::vector<TokenGrid> encode_bag(const std::vector<Frame>& frames, const EncoderConfig& cfg,
                                  const EncoderParams& params) {
    cfg.validate();
    if (frames.empty()) throw std::invalid_argument("encode_bag: no frames");
    const int q = static_cast<int>(frames.size());
    const int side = cfg.grid_side();
    const int m0 = side * side;
    const int patch_dim = cfg.patch_size * cfg.patch_size * cfg.in_channels;

    // Stack all frames' patch rows so projections and MLPs run as single
    // matmuls; only the attention cores stay per-window.
    diff::Buffer stacked;
    stacked.reserve(static_cast<size_t>(q) * m0 * patch_dim);
    for (const Frame& f : frames) {
        auto rows = patch_matrix(f, cfg);
        stacked.insert(stacked.end(), rows.begin(), rows.end());
    }
    Tensor patches(diff::Shape{q * m0, patch_dim}, std::move(stacked));

    std::vector<int> pos_idx(static_cast<size_t>(q) * m0);
    for (int f = 0; f < q; ++f)
        for (int i = 0; i < m0; ++i) pos_idx[static_cast<size_t>(f) * m0 + i] = i;
    Tensor x = diff::add(
        diff::add(diff::matmul(patches, params.patch_w.tensor), params.patch_b.tensor),
        diff::gather_rows(params.pos.tensor, pos_idx));

    const auto plans = layer_plans(cfg);
    const int per_stage = cfg.depth / (cfg.merge_stages + 1);
    int gh = side, gw = side;
    int tokens_per_frame = m0;

    for (int b = 0; b < cfg.depth; ++b) {
        if (b > 0 && b % per_stage == 0) {
            const PatchMergeParams& mp = params.merges[b / per_stage - 1];
            const auto local = merge_indices(gh, gw);
            std::vector<int> global;
            global.reserve(static_cast<size_t>(q) * local.size());
            for (int f = 0; f < q; ++f)
                for (int i : local) global.push_back(f * tokens_per_frame + i);
            Tensor grouped = diff::gather_rows(x, global);
            gh /= 2;
            gw /= 2;
            tokens_per_frame /= 4;
            Tensor wide = diff::reshape(grouped, {q * tokens_per_frame, 4 * plans[b - 1].dim});
            x = diff::matmul(diff::layernorm(wide, mp.ln_g.tensor, mp.ln_b.tensor), mp.w.tensor);
        }
        const LayerPlan& plan = plans[b];
        const EncoderBlockParams& blk = params.blocks[b];

        Tensor h = diff::layernorm(x, blk.ln1_g.tensor, blk.ln1_b.tensor);
        Tensor qkv = diff::add(diff::matmul(h, blk.attn.wqkv.tensor), blk.attn.bqkv.tensor);

        std::vector<Tensor> attended;  // rolled window order, frame-major
        attended.reserve(static_cast<size_t>(q) * plan.lists.size());
        for (int f = 0; f < q; ++f) {
            for (size_t w = 0; w < plan.lists.size(); ++w) {
                std::vector<int> rows = plan.lists[w];
                for (int& r : rows) r += f * tokens_per_frame;
                Tensor win_qkv = diff::gather_rows(qkv, rows);
                const Tensor* mask = plan.shift > 0 ? &plan.masks[w] : nullptr;
                attended.push_back(
                    attend_qkv(win_qkv, plan.dim, blk.attn.num_heads, mask, nullptr));
            }
        }
        // Undo the window permutation for all frames in one gather.
        std::vector<int> inverse(static_cast<size_t>(q) * tokens_per_frame);
        int pos = 0;
        for (int f = 0; f < q; ++f)
            for (const auto& idx : plan.lists)
                for (int orig : idx)
                    inverse[static_cast<size_t>(f) * tokens_per_frame + orig] = pos++;
        Tensor merged = diff::gather_rows(diff::concat_rows(attended), inverse);

        x = diff::add(x, diff::add(diff::matmul(merged, blk.wo.tensor), blk.bo.tensor));
        x = diff::add(x, mlp_block(diff::layernorm(x, blk.ln2_g.tensor, blk.ln2_b.tensor), blk));
    }
    Tensor out = diff::layernorm(x, params.lnf_g.tensor, params.lnf_b.tensor);

    std::vector<TokenGrid> grids;
    grids.reserve(static_cast<size_t>(q));
    for (int f = 0; f < q; ++f)
        grids.push_back(TokenGrid{
            diff::slice_rows(out, f * tokens_per_frame, tokens_per_frame), gh, gw});
    return grids;
}

}  // namespace emofuse::vision
