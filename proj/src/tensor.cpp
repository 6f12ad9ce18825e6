#include "emofuse/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace emofuse::diff {

using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

Buffer& Node::ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, Buffer data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, const std::vector<Scalar>& data, bool requires_grad)
    : Tensor(std::move(shape), Buffer(data.begin(), data.end()), requires_grad) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer(static_cast<size_t>(n), 0.0),
                  requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar v, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer(static_cast<size_t>(n), v),
                  requires_grad);
}

Tensor Tensor::scalar(Scalar v, bool requires_grad) {
    return Tensor(Shape{1}, Buffer{v}, requires_grad);
}

Tensor Tensor::from_rows(const std::vector<std::vector<Scalar>>& rows, bool requires_grad) {
    if (rows.empty()) throw ShapeError("from_rows: no rows");
    int m = static_cast<int>(rows.size());
    int n = static_cast<int>(rows[0].size());
    Buffer flat;
    flat.reserve(static_cast<size_t>(m) * n);
    for (const auto& r : rows) {
        if (static_cast<int>(r.size()) != n) throw ShapeError("from_rows: ragged rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor(Shape{m, n}, std::move(flat), requires_grad);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, Scalar stddev, bool requires_grad) {
    auto n = shape_numel(shape);
    std::normal_distribution<Scalar> dist(0.0, stddev);
    Buffer data(static_cast<size_t>(n));
    for (auto& v : data) v = dist(rng);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

int Tensor::rows() const {
    if (node_->shape.size() != 2) throw ShapeError("rows(): tensor is not 2-D");
    return node_->shape[0];
}

int Tensor::cols() const {
    if (node_->shape.size() != 2) throw ShapeError("cols(): tensor is not 2-D");
    return node_->shape[1];
}

Scalar Tensor::item() const {
    if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
}

Scalar Tensor::at(int r, int c) const {
    return node_->value[static_cast<size_t>(r) * cols() + c];
}

const Buffer& Tensor::grad() const {
    if (node_->grad.empty())
        throw std::logic_error("grad(): no gradient has been accumulated");
    return node_->grad;
}

void Tensor::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    return Tensor(node_->shape, node_->value, false);
}

bool Tensor::all_finite() const {
    for (Scalar v : node_->value)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::backward() {
    if (numel() != 1)
        throw ShapeError("backward(): root must be a scalar, got " + shape_str(shape()));

    // Reverse topological order by iterative DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    // Free the tape: drop edges and closures, keep values and leaf grads.
    for (Node* n : order) {
        n->parents.clear();
        n->backward = nullptr;
    }
}

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

Tensor make_op(Shape shape, Buffer value, std::vector<Tensor> parents,
               std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.node()->requires_grad;
    n->requires_grad = needs;
    if (needs) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
}

namespace {

CMapM mat(const Node& n) {
    return CMapM(n.value.data(), n.shape[0], n.shape[1]);
}

void require_2d(const Tensor& t, const char* who) {
    if (t.shape().size() != 2)
        throw ShapeError(std::string(who) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

// Treats any tensor as (rows, last_axis) for last-axis ops.
std::pair<int, int> as_rows(const Shape& s) {
    int last = s.back();
    std::int64_t rows = shape_numel(s) / last;
    return {static_cast<int>(rows), last};
}

enum class BCast { Same, Row, Scalar };

BCast classify_broadcast(const Tensor& a, const Tensor& b, const char* who, bool allow_row) {
    if (b.shape() == a.shape()) return BCast::Same;
    if (b.numel() == 1) return BCast::Scalar;
    if (allow_row && a.shape().size() == 2 && b.shape().size() == 2 && b.shape()[0] == 1 &&
        b.shape()[1] == a.shape()[1])
        return BCast::Row;
    throw ShapeError(std::string(who) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not broadcast");
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Buffer out(static_cast<size_t>(m) * n);
    MapM(out.data(), m, n).noalias() = mat(*a.node()) * mat(*b.node());
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](Node& node) {
        CMapM dc(node.grad.data(), m, n);
        Node& na = *node.parents[0];
        Node& nb = *node.parents[1];
        if (na.requires_grad)
            MapM(na.ensure_grad().data(), m, k).noalias() += dc * mat(nb).transpose();
        if (nb.requires_grad)
            MapM(nb.ensure_grad().data(), k, n).noalias() += mat(na).transpose() * dc;
    });
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const int m = a.rows(), n = a.cols();
    Buffer out(static_cast<size_t>(m) * n);
    MapM(out.data(), n, m) = mat(*a.node()).transpose();
    return make_op({n, m}, std::move(out), {a}, [m, n](Node& node) {
        Node& na = *node.parents[0];
        if (na.requires_grad)
            MapM(na.ensure_grad().data(), m, n) += CMapM(node.grad.data(), n, m).transpose();
    });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

namespace {

// Shared forward/backward skeleton for add/sub. sign is +1 or -1 on b.
Tensor addsub(const Tensor& a, const Tensor& b, Scalar sign, const char* who) {
    BCast bc = classify_broadcast(a, b, who, /*allow_row=*/true);
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    Buffer out(av.size());
    if (bc == BCast::Same) {
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + sign * bv[i];
    } else if (bc == BCast::Scalar) {
        const Scalar s = sign * bv[0];
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + s;
    } else {
        const size_t n = bv.size();
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + sign * bv[i % n];
    }
    return make_op(a.shape(), std::move(out), {a, b}, [bc, sign](Node& node) {
        Node& na = *node.parents[0];
        Node& nb = *node.parents[1];
        if (na.requires_grad) {
            auto& ga = na.ensure_grad();
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += node.grad[i];
        }
        if (nb.requires_grad) {
            auto& gb = nb.ensure_grad();
            if (bc == BCast::Same) {
                for (size_t i = 0; i < gb.size(); ++i) gb[i] += sign * node.grad[i];
            } else if (bc == BCast::Scalar) {
                Scalar s = 0;
                for (Scalar g : node.grad) s += g;
                gb[0] += sign * s;
            } else {
                const size_t n = gb.size();
                for (size_t i = 0; i < node.grad.size(); ++i) gb[i % n] += sign * node.grad[i];
            }
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return addsub(a, b, +1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return addsub(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
    BCast bc = classify_broadcast(a, b, "mul", /*allow_row=*/false);
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    Buffer out(av.size());
    if (bc == BCast::Same)
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    else
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[0];
    return make_op(a.shape(), std::move(out), {a, b}, [bc](Node& node) {
        Node& na = *node.parents[0];
        Node& nb = *node.parents[1];
        const auto& av = na.value;
        const auto& bv = nb.value;
        if (na.requires_grad) {
            auto& ga = na.ensure_grad();
            if (bc == BCast::Same)
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += node.grad[i] * bv[i];
            else
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += node.grad[i] * bv[0];
        }
        if (nb.requires_grad) {
            auto& gb = nb.ensure_grad();
            if (bc == BCast::Same) {
                for (size_t i = 0; i < gb.size(); ++i) gb[i] += node.grad[i] * av[i];
            } else {
                Scalar s = 0;
                for (size_t i = 0; i < av.size(); ++i) s += node.grad[i] * av[i];
                gb[0] += s;
            }
        }
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    BCast bc = classify_broadcast(a, b, "div", /*allow_row=*/false);
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    Buffer out(av.size());
    if (bc == BCast::Same)
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
    else
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[0];
    return make_op(a.shape(), std::move(out), {a, b}, [bc](Node& node) {
        Node& na = *node.parents[0];
        Node& nb = *node.parents[1];
        const auto& av = na.value;
        const auto& bv = nb.value;
        if (na.requires_grad) {
            auto& ga = na.ensure_grad();
            if (bc == BCast::Same)
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += node.grad[i] / bv[i];
            else
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += node.grad[i] / bv[0];
        }
        if (nb.requires_grad) {
            auto& gb = nb.ensure_grad();
            if (bc == BCast::Same) {
                for (size_t i = 0; i < gb.size(); ++i)
                    gb[i] -= node.grad[i] * av[i] / (bv[i] * bv[i]);
            } else {
                Scalar s = 0;
                for (size_t i = 0; i < av.size(); ++i) s += node.grad[i] * av[i];
                gb[0] -= s / (bv[0] * bv[0]);
            }
        }
    });
}

Tensor scale(const Tensor& a, Scalar c) {
    const auto& av = a.node()->value;
    Buffer out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
    return make_op(a.shape(), std::move(out), {a}, [c](Node& node) {
        Node& na = *node.parents[0];
        if (!na.requires_grad) return;
        auto& ga = na.ensure_grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += c * node.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions and layout
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
    Scalar s = 0;
    for (Scalar v : a.node()->value) s += v;
    return make_op({1}, {s}, {a}, [](Node& node) {
        Node& na = *node.parents[0];
        if (!na.requires_grad) return;
        auto& ga = na.ensure_grad();
        const Scalar g = node.grad[0];
        for (auto& v : ga) v += g;
    });
}

Tensor mean_rows(const Tensor& a) {
    require_2d(a, "mean_rows");
    const int m = a.rows(), n = a.cols();
    Buffer out(static_cast<size_t>(n));
    MapM o(out.data(), 1, n);
    o = mat(*a.node()).colwise().mean();
    return make_op({1, n}, std::move(out), {a}, [m, n](Node& node) {
        Node& na = *node.parents[0];
        if (!na.requires_grad) return;
        MapM ga(na.ensure_grad().data(), m, n);
        CMapM dc(node.grad.data(), 1, n);
        ga.rowwise() += dc.row(0) / static_cast<Scalar>(m);
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const int n = parts[0].cols();
    int m = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_rows");
        if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
        m += p.rows();
    }
    Buffer out;
    out.reserve(static_cast<size_t>(m) * n);
    for (const auto& p : parts)
        out.insert(out.end(), p.node()->value.begin(), p.node()->value.end());
    return make_op({m, n}, std::move(out), parts, [n](Node& node) {
        size_t off = 0;
        for (auto& pp : node.parents) {
            Node& p = *pp;
            const size_t cnt = p.value.size();
            if (p.requires_grad) {
                auto& g = p.ensure_grad();
                for (size_t i = 0; i < cnt; ++i) g[i] += node.grad[off + i];
            }
            off += cnt;
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int m = parts[0].rows();
    int n = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
        n += p.cols();
    }
    Buffer out(static_cast<size_t>(m) * n);
    MapM o(out.data(), m, n);
    int col = 0;
    for (const auto& p : parts) {
        o.middleCols(col, p.cols()) = mat(*p.node());
        col += p.cols();
    }
    return make_op({m, n}, std::move(out), parts, [m, n](Node& node) {
        CMapM dc(node.grad.data(), m, n);
        int col = 0;
        for (auto& pp : node.parents) {
            Node& p = *pp;
            const int pc = p.shape[1];
            if (p.requires_grad)
                MapM(p.ensure_grad().data(), m, pc) += dc.middleCols(col, pc);
            col += pc;
        }
    });
}

Tensor slice_rows(const Tensor& a, int start, int len) {
    require_2d(a, "slice_rows");
    const int m = a.rows(), n = a.cols();
    if (start < 0 || len < 1 || start + len > m)
        throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") out of " + std::to_string(m));
    Buffer out(a.node()->value.begin() + static_cast<size_t>(start) * n,
                            a.node()->value.begin() + static_cast<size_t>(start + len) * n);
    return make_op({len, n}, std::move(out), {a}, [start, len, n](Node& node) {
        Node& na = *node.parents[0];
        if (!na.requires_grad) return;
        auto& ga = na.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i)
            ga[static_cast<size_t>(start) * n + i] += node.grad[i];
    });
}

Tensor slice_cols(const Tensor& a, int start, int len) {
    require_2d(a, "slice_cols");
    const int m = a.rows(), n = a.cols();
    if (start < 0 || len < 1 || start + len > n)
        throw std::invalid_argument("slice_cols: range out of " + std::to_string(n) + " columns");
    Buffer out(static_cast<size_t>(m) * len);
    MapM(out.data(), m, len) = mat(*a.node()).middleCols(start, len);
    return make_op({m, len}, std::move(out), {a}, [m, n, start, len](Node& node) {
        Node& na = *node.parents[0];
        if (!na.requires_grad) return;
        MapM(na.ensure_grad().data(), m, n).middleCols(start, len) +=
            CMapM(node.grad.data(), m, len);
    });
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& indices) {
    require_2d(a, "gather_rows");
    const int m = a.rows(), n = a.cols();
    for (int i : indices)
        if (i < 0 || i >= m)
            throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " out of " +
                                        std::to_string(m) + " rows");
    Buffer out(indices.size() * static_cast<size_t>(n));
    const auto& av = a.node()->value;
    for (size_t r = 0; r < indices.size(); ++r)
        std::copy_n(av.begin() + static_cast<size_t>(indices[r]) * n, n, out.begin() + r * n);
    return make_op({static_cast<int>(indices.size()), n}, std::move(out), {a},
                   [indices, n](Node& node) {
                       Node& na = *node.parents[0];
                       if (!na.requires_grad) return;
                       auto& ga = na.ensure_grad();
                       for (size_t r = 0; r < indices.size(); ++r)
                           for (int j = 0; j < n; ++j)
                               ga[static_cast<size_t>(indices[r]) * n + j] += node.grad[r * n + j];
                   });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    return make_op(std::move(shape), a.node()->value, {a}, [](Node& node) {
        Node& na = *node.parents[0];
        if (!na.requires_grad) return;
        auto& ga = na.ensure_grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += node.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

Tensor softmax_lastaxis(const Tensor& x) {
    auto [rows, n] = as_rows(x.shape());
    const auto& xv = x.node()->value;
    Buffer out(xv.size());
    for (int r = 0; r < rows; ++r) {
        const Scalar* src = xv.data() + static_cast<size_t>(r) * n;
        Scalar* dst = out.data() + static_cast<size_t>(r) * n;
        Scalar mx = src[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, src[j]);
        Scalar sum = 0;
        for (int j = 0; j < n; ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        for (int j = 0; j < n; ++j) dst[j] /= sum;
    }
    return make_op(x.shape(), std::move(out), {x}, [rows = rows, n = n](Node& node) {
        Node& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        auto& gx = nx.ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const Scalar* y = node.value.data() + static_cast<size_t>(r) * n;
            const Scalar* dy = node.grad.data() + static_cast<size_t>(r) * n;
            Scalar dot = 0;
            for (int j = 0; j < n; ++j) dot += y[j] * dy[j];
            Scalar* g = gx.data() + static_cast<size_t>(r) * n;
            for (int j = 0; j < n; ++j) g[j] += y[j] * (dy[j] - dot);
        }
    });
}

namespace {

// Unary op with derivative expressed from input x and output y.
template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd dfdx) {
    const auto& xv = x.node()->value;
    Buffer out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    return make_op(x.shape(), std::move(out), {x}, [dfdx](Node& node) {
        Node& nx = *node.parents[0];
        if (!nx.requires_grad) return;
        auto& gx = nx.ensure_grad();
        for (size_t i = 0; i < gx.size(); ++i)
            gx[i] += node.grad[i] * dfdx(nx.value[i], node.value[i]);
    });
}

}  // namespace

Tensor tanh(const Tensor& x) {
    return unary(
        x, [](Scalar v) { return std::tanh(v); },
        [](Scalar, Scalar y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
    return unary(
        x, [](Scalar v) { return v > 0 ? v : 0.0; },
        [](Scalar v, Scalar) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    static constexpr Scalar kSqrt2OverPi = 0.7978845608028654;
    static constexpr Scalar kCubic = 0.044715;
    return unary(
        x,
        [](Scalar v) {
            return 0.5 * v * (1.0 + std::tanh(kSqrt2OverPi * (v + kCubic * v * v * v)));
        },
        [](Scalar v, Scalar) {
            const Scalar u = kSqrt2OverPi * (v + kCubic * v * v * v);
            const Scalar t = std::tanh(u);
            const Scalar du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        });
}

Tensor exp(const Tensor& x) {
    return unary(
        x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

Tensor log(const Tensor& x) {
    for (Scalar v : x.node()->value)
        if (v <= 0.0)
            throw std::domain_error("log: non-positive input " + std::to_string(v));
    return unary(
        x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return 1.0 / v; });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
    auto [rows, n] = as_rows(x.shape());
    if (gamma.numel() != n || beta.numel() != n)
        throw ShapeError("layernorm: gamma/beta length " + std::to_string(gamma.numel()) +
                         " does not match last axis " + std::to_string(n));
    const auto& xv = x.node()->value;
    const auto& gv = gamma.node()->value;
    const auto& bv = beta.node()->value;
    Buffer out(xv.size());
    Buffer xhat(xv.size());
    Buffer inv_std(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const Scalar* src = xv.data() + static_cast<size_t>(r) * n;
        Scalar mean = 0;
        for (int j = 0; j < n; ++j) mean += src[j];
        mean /= n;
        Scalar var = 0;
        for (int j = 0; j < n; ++j) {
            const Scalar c = src[j] - mean;
            var += c * c;
        }
        var /= n;
        const Scalar inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        Scalar* xh = xhat.data() + static_cast<size_t>(r) * n;
        Scalar* dst = out.data() + static_cast<size_t>(r) * n;
        for (int j = 0; j < n; ++j) {
            xh[j] = (src[j] - mean) * inv;
            dst[j] = gv[j] * xh[j] + bv[j];
        }
    }
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [rows = rows, n = n, xhat = std::move(xhat),
                    inv_std = std::move(inv_std)](Node& node) {
                       Node& nx = *node.parents[0];
                       Node& ng = *node.parents[1];
                       Node& nb = *node.parents[2];
                       const auto& gv = ng.value;
                       for (int r = 0; r < rows; ++r) {
                           const Scalar* dy = node.grad.data() + static_cast<size_t>(r) * n;
                           const Scalar* xh = xhat.data() + static_cast<size_t>(r) * n;
                           if (ng.requires_grad) {
                               auto& gg = ng.ensure_grad();
                               for (int j = 0; j < n; ++j) gg[j] += dy[j] * xh[j];
                           }
                           if (nb.requires_grad) {
                               auto& gb = nb.ensure_grad();
                               for (int j = 0; j < n; ++j) gb[j] += dy[j];
                           }
                           if (nx.requires_grad) {
                               Scalar mean_dxhat = 0, mean_dxhat_xhat = 0;
                               for (int j = 0; j < n; ++j) {
                                   const Scalar dxh = dy[j] * gv[j];
                                   mean_dxhat += dxh;
                                   mean_dxhat_xhat += dxh * xh[j];
                               }
                               mean_dxhat /= n;
                               mean_dxhat_xhat /= n;
                               auto& gx = nx.ensure_grad();
                               Scalar* g = gx.data() + static_cast<size_t>(r) * n;
                               for (int j = 0; j < n; ++j) {
                                   const Scalar dxh = dy[j] * gv[j];
                                   g[j] += inv_std[r] *
                                           (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                               }
                           }
                       }
                   });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    require_2d(logits, "cross_entropy");
    const int b = logits.rows(), n = logits.cols();
    if (static_cast<int>(labels.size()) != b)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
    for (int l : labels)
        if (l < 0 || l >= n)
            throw std::out_of_range("cross_entropy: label " + std::to_string(l) +
                                    " outside [0," + std::to_string(n) + ")");
    const auto& lv = logits.node()->value;
    Buffer probs(lv.size());
    Scalar loss = 0;
    for (int r = 0; r < b; ++r) {
        const Scalar* src = lv.data() + static_cast<size_t>(r) * n;
        Scalar* p = probs.data() + static_cast<size_t>(r) * n;
        Scalar mx = src[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, src[j]);
        Scalar sum = 0;
        for (int j = 0; j < n; ++j) {
            p[j] = std::exp(src[j] - mx);
            sum += p[j];
        }
        for (int j = 0; j < n; ++j) p[j] /= sum;
        loss -= std::log(p[labels[r]]);
    }
    loss /= b;
    return make_op({1}, {loss}, {logits},
                   [b, n, labels, probs = std::move(probs)](Node& node) {
                       Node& nl = *node.parents[0];
                       if (!nl.requires_grad) return;
                       auto& g = nl.ensure_grad();
                       const Scalar go = node.grad[0] / b;
                       for (int r = 0; r < b; ++r) {
                           const Scalar* p = probs.data() + static_cast<size_t>(r) * n;
                           Scalar* dst = g.data() + static_cast<size_t>(r) * n;
                           for (int j = 0; j < n; ++j)
                               dst[j] += go * (p[j] - (j == labels[r] ? 1.0 : 0.0));
                       }
                   });
}

std::vector<int> topk_indices(const Tensor& x, int k) {
    const int n = static_cast<int>(x.numel());
    if (k < 1 || k > n)
        throw std::invalid_argument("topk_indices: k=" + std::to_string(k) + " outside [1," +
                                    std::to_string(n) + "]");
    const auto& v = x.node()->value;
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return a < b;  // tie: lower index wins
    });
    idx.resize(static_cast<size_t>(k));
    return idx;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

GradcheckReport gradcheck(const std::function<Tensor()>& f,
                          const std::vector<Parameter*>& params, double h) {
    GradcheckReport report;

    for (Parameter* p : params) {
        p->tensor.node()->grad.clear();
    }
    Tensor loss = f();
    loss.backward();

    std::vector<Buffer> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) {
        auto& node = *p->tensor.node();
        if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
        for (Scalar g : node.grad) {
            if (!std::isfinite(g)) {
                report.ok = false;
                report.message = "non-finite analytic gradient in parameter '" + p->name + "'";
                report.worst_param = p->name;
                return report;
            }
        }
        analytic.push_back(node.grad);
    }

    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        auto& value = p->tensor.node()->value;
        for (size_t i = 0; i < value.size(); ++i) {
            const Scalar orig = value[i];
            value[i] = orig + h;
            const Scalar up = f().item();
            value[i] = orig - h;
            const Scalar down = f().item();
            value[i] = orig;
            const Scalar numeric = (up - down) / (2.0 * h);
            const Scalar ga = analytic[pi][i];
            if (!std::isfinite(numeric)) {
                report.ok = false;
                report.message = "non-finite numeric gradient in parameter '" + p->name + "'";
                report.worst_param = p->name;
                return report;
            }
            const Scalar rel =
                std::abs(ga - numeric) / std::max({1.0, std::abs(ga), std::abs(numeric)});
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = p->name;
            }
        }
    }
    return report;
}

}  // namespace emofuse::diff
