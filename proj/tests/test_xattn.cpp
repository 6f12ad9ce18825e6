#include "doctest.h"

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "emofuse/xattn.hpp"

using namespace emofuse;
using namespace emofuse::xattn;
using diff::Tensor;

namespace {

CompressorParams identity_params(int dim) {
    CompressorParams p;
    auto eye = [&](const char* name) {
        Tensor t = Tensor::zeros({dim, dim});
        for (int i = 0; i < dim; ++i) t.mutable_data()[static_cast<size_t>(i) * dim + i] = 1.0;
        return diff::Parameter(name, t);
    };
    p.wq = eye("wq");
    p.wk = eye("wk");
    p.wv = eye("wv");
    p.num_heads = 1;
    return p;
}

// Straight-line re-evaluation of the three projection formulas and the
// scaled dot-product, kept independent of the tensor engine.
Eigen::MatrixXd compress_oracle(const Eigen::MatrixXd& xq, const Eigen::MatrixXd& xv,
                                const Eigen::MatrixXd& wq, const Eigen::MatrixXd& wk,
                                const Eigen::MatrixXd& wv) {
    const Eigen::MatrixXd q = xq * wq;
    const Eigen::MatrixXd k = xv * wk;
    const Eigen::MatrixXd v = xv * wv;
    Eigen::MatrixXd scores = q * k.transpose() / std::sqrt(static_cast<double>(q.cols()));
    for (int r = 0; r < scores.rows(); ++r) {
        const double mx = scores.row(r).maxCoeff();
        Eigen::ArrayXd e = (scores.row(r).array() - mx).exp();
        scores.row(r) = (e / e.sum()).matrix();
    }
    return scores * v;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
    Eigen::MatrixXd m(t.rows(), t.cols());
    for (int r = 0; r < t.rows(); ++r)
        for (int c = 0; c < t.cols(); ++c) m(r, c) = t.at(r, c);
    return m;
}

}  // namespace

TEST_CASE("single visual token with identity projections passes through") {
    std::mt19937_64 rng(1);
    const int d = 5;
    QueryBank bank = QueryBank::init(1, d, rng, "bank");
    auto params = identity_params(d);

    Tensor xv = Tensor::randn({1, d}, rng);
    Tensor out = compress(xv, bank, params);
    REQUIRE(out.rows() == 1);
    for (int c = 0; c < d; ++c) CHECK(out.at(0, c) == doctest::Approx(xv.at(0, c)).epsilon(1e-12));
}

TEST_CASE("identical visual tokens collapse to that token") {
    std::mt19937_64 rng(2);
    const int d = 4, m = 6, n = 3;
    QueryBank bank = QueryBank::init(n, d, rng, "bank");
    auto params = identity_params(d);

    Tensor row = Tensor::randn({1, d}, rng);
    std::vector<Tensor> rows(m, row);
    Tensor xv = diff::concat_rows(rows);
    Tensor out = compress(xv, bank, params);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c)
            CHECK(out.at(r, c) == doctest::Approx(row.at(0, c)).epsilon(1e-12));
}

TEST_CASE("random case matches the straight-line oracle") {
    std::mt19937_64 rng(3);
    const int d = 4, m = 3, n = 2;
    QueryBank bank = QueryBank::init(n, d, rng, "bank");
    auto params = CompressorParams::init(d, 1, rng, "comp");
    Tensor xv = Tensor::randn({m, d}, rng);

    Tensor out = compress(xv, bank, params);
    Eigen::MatrixXd expect =
        compress_oracle(to_eigen(bank.queries.tensor), to_eigen(xv), to_eigen(params.wq.tensor),
                        to_eigen(params.wk.tensor), to_eigen(params.wv.tensor));
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c)
            CHECK(out.at(r, c) == doctest::Approx(expect(r, c)).epsilon(1e-12));
}

TEST_CASE("output shape is (N, D) regardless of M") {
    std::mt19937_64 rng(4);
    const int d = 8, n = 4;
    QueryBank bank = QueryBank::init(n, d, rng, "bank");
    auto params = CompressorParams::init(d, 2, rng, "comp");
    for (int m : {1, 5, 49, 147}) {
        Tensor out = compress(Tensor::randn({m, d}, rng), bank, params);
        CHECK(out.rows() == n);
        CHECK(out.cols() == d);
    }
    CHECK_THROWS_AS(compress(Tensor::randn({3, d + 1}, rng), bank, params), diff::ShapeError);
}

TEST_CASE("attention rows are probabilities and outputs stay in the value hull") {
    std::mt19937_64 rng(5);
    const int d = 2, m = 3, n = 4;
    QueryBank bank = QueryBank::init(n, d, rng, "bank");
    auto params = CompressorParams::init(d, 1, rng, "comp");
    Tensor xv = Tensor::randn({m, d}, rng);

    std::vector<Tensor> probs;
    Tensor out = compress(xv, bank, params, &probs);
    REQUIRE(probs.size() == 1);
    for (int r = 0; r < n; ++r) {
        double sum = 0;
        for (int j = 0; j < m; ++j) {
            CHECK(probs[0].at(r, j) >= 0.0);
            sum += probs[0].at(r, j);
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }

    // Hull membership oracle: with M = D+1 = 3 value rows in the plane, the
    // convex-combination system [V^T; 1^T] p = [out; 1] has a unique
    // solution; the output is in the hull iff p >= 0.
    const Eigen::MatrixXd v = to_eigen(xv) * to_eigen(params.wv.tensor);
    for (int r = 0; r < n; ++r) {
        Eigen::Matrix3d a;
        a << v(0, 0), v(1, 0), v(2, 0), v(0, 1), v(1, 1), v(2, 1), 1, 1, 1;
        Eigen::Vector3d b(out.at(r, 0), out.at(r, 1), 1.0);
        Eigen::Vector3d p = a.colPivHouseholderQr().solve(b);
        CHECK((a * p - b).norm() < 1e-9);
        for (int j = 0; j < 3; ++j) CHECK(p[j] > -1e-9);
    }
}

TEST_CASE("gradients reach queries, projections, and visual tokens") {
    std::mt19937_64 rng(6);
    const int d = 4, m = 3, n = 2;
    QueryBank bank = QueryBank::init(n, d, rng, "bank");
    auto params = CompressorParams::init(d, 2, rng, "comp");
    diff::Parameter xv("xv", Tensor::randn({m, d}, rng));
    Tensor probe = Tensor::randn({n, d}, rng);

    auto loss = [&]() { return diff::sum_all(diff::mul(compress(xv.tensor, bank, params), probe)); };
    std::vector<diff::Parameter*> ps{&bank.queries, &params.wq, &params.wk, &params.wv, &xv};
    auto report = diff::gradcheck(loss, ps, 1e-5);
    CHECK(report.ok);
    CHECK(report.max_rel_err < 1e-4);

    for (auto* p : ps) p->tensor.zero_grad();
    loss().backward();
    for (auto* p : ps) {
        double norm = 0;
        for (double g : p->tensor.grad()) norm += g * g;
        INFO("param ", p->name);
        CHECK(norm > 1e-14);
    }
}
