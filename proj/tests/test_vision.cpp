#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>

#include "emofuse/vision.hpp"

using namespace emofuse;
using namespace emofuse::vision;
using diff::Tensor;

namespace {

Frame random_frame(int size, std::mt19937_64& rng, int channels = 1) {
    Frame f;
    f.height = f.width = size;
    f.channels = channels;
    f.pixels.resize(static_cast<size_t>(size) * size * channels);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (auto& p : f.pixels) p = uni(rng);
    return f;
}

EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 2;
    cfg.embed_dim = 4;
    cfg.depth = 2;
    cfg.window_size = 2;
    cfg.num_heads = 2;
    cfg.mlp_ratio = 2;
    return cfg;
}

}  // namespace

TEST_CASE("patch_embed token counts") {
    std::mt19937_64 rng(1);

    EncoderConfig desk;  // 56x56, patch 8
    auto params = EncoderParams::init(desk, rng, "enc");
    Frame f = random_frame(56, rng);
    auto grid = patch_embed(f, desk, params);
    CHECK(grid.tokens.rows() == 49);
    CHECK(grid.tokens.cols() == 64);
    CHECK(grid.grid_h == 7);

    EncoderConfig paper;  // 224x224, patch 32 -> the same 7x7 token grid
    paper.image_size = 224;
    paper.patch_size = 32;
    auto params2 = EncoderParams::init(paper, rng, "enc2");
    auto grid2 = patch_embed(random_frame(224, rng), paper, params2);
    CHECK(grid2.tokens.rows() == 49);

    EncoderConfig bad = desk;
    bad.image_size = 50;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("zero image embeds to the projection bias row") {
    std::mt19937_64 rng(2);
    EncoderConfig cfg = tiny_config();
    auto params = EncoderParams::init(cfg, rng, "enc");
    // silence the position table so only the bias path remains
    for (auto& v : params.pos.tensor.mutable_data()) v = 0.0;

    Frame zero;
    zero.height = zero.width = 8;
    zero.channels = 1;
    zero.pixels.assign(64, 0.0);
    auto grid = patch_embed(zero, cfg, params);
    for (int r = 0; r < grid.tokens.rows(); ++r)
        for (int c = 0; c < grid.tokens.cols(); ++c)
            CHECK(grid.tokens.at(r, c) == params.patch_b.tensor.at(0, c));
}

TEST_CASE("window partition and reverse round trip") {
    std::mt19937_64 rng(3);
    TokenGrid grid{Tensor::randn({14 * 14, 5}, rng), 14, 14};

    SUBCASE("regular") {
        auto windows = window_partition(grid, 7, 0);
        CHECK(windows.size() == 4);
        for (const auto& w : windows) CHECK(w.rows() == 49);
        Tensor back = window_reverse(windows, 14, 14, 7, 0);
        CHECK(back.data() == grid.tokens.data());
    }
    SUBCASE("shifted") {
        auto windows = window_partition(grid, 7, 3);
        Tensor back = window_reverse(windows, 14, 14, 7, 3);
        CHECK(back.data() == grid.tokens.data());
    }
    SUBCASE("indivisible grid is rejected") {
        TokenGrid odd{Tensor::zeros({9, 5}), 3, 3};
        CHECK_THROWS_AS(window_partition(odd, 2, 0), std::invalid_argument);
    }
}

TEST_CASE("single-token window returns its own value projection") {
    std::mt19937_64 rng(4);
    const int d = 6;
    AttentionParams ap;
    ap.wqkv = diff::Parameter("wqkv", Tensor::randn({d, 3 * d}, rng, 0.5));
    ap.bqkv = diff::Parameter("bqkv", Tensor::randn({1, 3 * d}, rng, 0.5));
    ap.num_heads = 2;

    Tensor token = Tensor::randn({1, d}, rng);
    Tensor out = window_attention(token, ap);

    // expected: value slice of token * wqkv + bqkv
    for (int c = 0; c < d; ++c) {
        double v = ap.bqkv.tensor.at(0, 2 * d + c);
        for (int k = 0; k < d; ++k) v += token.at(0, k) * ap.wqkv.tensor.at(k, 2 * d + c);
        CHECK(out.at(0, c) == doctest::Approx(v).epsilon(1e-12));
    }
}

TEST_CASE("self-only mask reduces attention to the value projection") {
    std::mt19937_64 rng(5);
    const int d = 4, t = 3;
    AttentionParams ap;
    ap.wqkv = diff::Parameter("wqkv", Tensor::randn({d, 3 * d}, rng, 0.5));
    ap.bqkv = diff::Parameter("bqkv", Tensor::zeros({1, 3 * d}));
    ap.num_heads = 1;

    const double ninf = -std::numeric_limits<double>::infinity();
    Tensor mask = Tensor::zeros({t, t});
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j)
            if (i != j) mask.mutable_data()[static_cast<size_t>(i) * t + j] = ninf;

    Tensor tokens = Tensor::randn({t, d}, rng);
    Tensor out = window_attention(tokens, ap, &mask);
    for (int i = 0; i < t; ++i)
        for (int c = 0; c < d; ++c) {
            double v = 0;
            for (int k = 0; k < d; ++k) v += tokens.at(i, k) * ap.wqkv.tensor.at(k, 2 * d + c);
            CHECK(out.at(i, c) == doctest::Approx(v).epsilon(1e-12));
        }
}

TEST_CASE("attention rows are probability vectors") {
    std::mt19937_64 rng(6);
    const int d = 8, t = 9;
    AttentionParams ap;
    ap.wqkv = diff::Parameter("wqkv", Tensor::randn({d, 3 * d}, rng, 0.3));
    ap.bqkv = diff::Parameter("bqkv", Tensor::randn({1, 3 * d}, rng, 0.3));
    ap.num_heads = 4;

    std::vector<Tensor> probs;
    window_attention(Tensor::randn({t, d}, rng), ap, nullptr, &probs);
    CHECK(probs.size() == 4);
    for (const auto& p : probs)
        for (int r = 0; r < t; ++r) {
            double sum = 0;
            for (int j = 0; j < t; ++j) sum += p.at(r, j);
            CHECK(std::abs(sum - 1.0) < 1e-10);
        }
}

TEST_CASE("shifted masking blocks wrapped pairs exactly") {
    std::mt19937_64 rng(7);
    const int side = 4, win = 4, shift = 2, d = 4;
    AttentionParams ap;
    ap.wqkv = diff::Parameter("wqkv", Tensor::randn({d, 3 * d}, rng, 0.4));
    ap.bqkv = diff::Parameter("bqkv", Tensor::zeros({1, 3 * d}));
    ap.num_heads = 1;

    auto masks = shifted_window_masks(side, side, win, shift);
    REQUIRE(masks.size() == 1);
    TokenGrid grid{Tensor::randn({side * side, d}, rng), side, side};
    auto windows = window_partition(grid, win, shift);

    std::vector<Tensor> probs;
    window_attention(windows[0], ap, &masks[0], &probs);
    // rolled position (i,j) holds a token that wrapped iff i or j >= side-shift
    auto wrapped_row = [&](int flat) { return flat / win >= side - shift; };
    auto wrapped_col = [&](int flat) { return flat % win >= side - shift; };
    int blocked = 0;
    for (int a = 0; a < win * win; ++a)
        for (int b = 0; b < win * win; ++b) {
            if (wrapped_row(a) != wrapped_row(b) || wrapped_col(a) != wrapped_col(b)) {
                CHECK(probs[0].at(a, b) == 0.0);
                ++blocked;
            }
        }
    CHECK(blocked > 0);
}

TEST_CASE("encode_frame shape, determinism, and bag equivalence") {
    std::mt19937_64 rng(8);
    EncoderConfig desk;
    auto params = EncoderParams::init(desk, rng, "enc");
    Frame f = random_frame(56, rng);

    auto g1 = encode_frame(f, desk, params);
    CHECK(g1.tokens.rows() == 49);
    CHECK(g1.tokens.cols() == 64);

    auto g2 = encode_frame(f, desk, params);
    CHECK(g1.tokens.data() == g2.tokens.data());  // bitwise determinism

    Frame f2 = random_frame(56, rng);
    auto bag = encode_bag({f, f2}, desk, params);
    REQUIRE(bag.size() == 2);
    auto ref2 = encode_frame(f2, desk, params);
    for (int i = 0; i < 49 * 64; ++i) {
        CHECK(bag[0].tokens.data()[i] == doctest::Approx(g1.tokens.data()[i]).epsilon(1e-10));
        CHECK(bag[1].tokens.data()[i] == doctest::Approx(ref2.tokens.data()[i]).epsilon(1e-10));
    }

    // permuting the bag permutes the outputs identically
    auto swapped = encode_bag({f2, f}, desk, params);
    CHECK(swapped[1].tokens.data() == bag[0].tokens.data());
    CHECK(swapped[0].tokens.data() == bag[1].tokens.data());
}

TEST_CASE("patch merging halves the grid and doubles the dim") {
    std::mt19937_64 rng(9);
    EncoderConfig cfg = tiny_config();
    cfg.merge_stages = 1;
    auto params = EncoderParams::init(cfg, rng, "enc");
    auto grid = encode_frame(random_frame(8, rng), cfg, params);
    CHECK(grid.tokens.rows() == 4);
    CHECK(grid.tokens.cols() == 8);
    CHECK(cfg.out_tokens() == 4);
    CHECK(cfg.out_dim() == 8);
}

TEST_CASE("gradcheck through a 2-layer encoder") {
    std::mt19937_64 rng(10);
    EncoderConfig cfg = tiny_config();
    auto params = EncoderParams::init(cfg, rng, "enc");
    Frame f = random_frame(8, rng);
    Tensor probe = Tensor::randn({16, 4}, rng);  // fixed projection of the output

    auto loss = [&]() {
        return diff::sum_all(diff::mul(encode_frame(f, cfg, params).tokens, probe));
    };
    auto report = diff::gradcheck(loss, params.all(), 1e-5);
    CHECK(report.ok);
    CHECK(report.max_rel_err < 1e-4);
}
