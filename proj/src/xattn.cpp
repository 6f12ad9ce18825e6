#include "emofuse/xattn.hpp"

#include <cmath>
#include <stdexcept>

namespace emofuse::xattn {

using diff::Tensor;

QueryBank QueryBank::init(int n_queries, int dim, std::mt19937_64& rng,
                          const std::string& prefix) {
    if (n_queries < 1) throw std::invalid_argument("query bank: need at least one query");
    QueryBank b;
    b.queries = diff::Parameter(prefix + ".queries", Tensor::randn({n_queries, dim}, rng, 0.02));
    return b;
}

CompressorParams CompressorParams::init(int dim, int num_heads, std::mt19937_64& rng,
                                        const std::string& prefix) {
    if (num_heads < 1 || dim % num_heads != 0)
        throw std::invalid_argument("compressor: dim must divide into heads");
    CompressorParams p;
    p.wq = diff::Parameter(prefix + ".wq", Tensor::randn({dim, dim}, rng, 0.02));
    p.wk = diff::Parameter(prefix + ".wk", Tensor::randn({dim, dim}, rng, 0.02));
    p.wv = diff::Parameter(prefix + ".wv", Tensor::randn({dim, dim}, rng, 0.02));
    p.num_heads = num_heads;
    return p;
}

Tensor compress(const Tensor& visual_tokens, const QueryBank& bank,
                const CompressorParams& params, std::vector<Tensor>* probs_out) {
    const int dim = bank.queries.tensor.cols();
    if (visual_tokens.cols() != dim)
        throw diff::ShapeError("compress: token dim " + std::to_string(visual_tokens.cols()) +
                               " does not match query dim " + std::to_string(dim));
    if (visual_tokens.rows() < 1) throw diff::ShapeError("compress: no visual tokens");

    Tensor q = diff::matmul(bank.queries.tensor, params.wq.tensor);
    Tensor k = diff::matmul(visual_tokens, params.wk.tensor);
    Tensor v = diff::matmul(visual_tokens, params.wv.tensor);

    const int dh = dim / params.num_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    auto attend = [&](const Tensor& qh, const Tensor& kh, const Tensor& vh) {
        Tensor probs =
            diff::softmax_lastaxis(diff::scale(diff::matmul(qh, diff::transpose(kh)), inv_sqrt));
        if (probs_out != nullptr) probs_out->push_back(probs);
        return diff::matmul(probs, vh);
    };
    if (params.num_heads == 1) return attend(q, k, v);

    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(params.num_heads));
    for (int h = 0; h < params.num_heads; ++h)
        heads.push_back(attend(diff::slice_cols(q, h * dh, dh), diff::slice_cols(k, h * dh, dh),
                               diff::slice_cols(v, h * dh, dh)));
    return diff::concat_cols(heads);
}

}  // namespace emofuse::xattn
