#pragma once

// Reverse-mode differentiable tensor engine. Dense row-major doubles, a
// define-by-run tape (graph built during forward, freed after backward),
// and the op set the model needs. Eigen does the heavy lifting behind the
// free functions; nothing here is thread-aware — one tape, one thread.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace emofuse::diff {

using Scalar = double;
using Shape = std::vector<int>;

// 64-byte aligned storage so Eigen's vectorized kernels take the same code
// path for every allocation; replaying a tape is then bit-identical.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::size_t alignment = 64;

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
    }
    void deallocate(T* p, std::size_t) noexcept {
        ::operator delete(p, std::align_val_t(alignment));
    }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const {
        return true;
    }
    template <typename U>
    bool operator!=(const AlignedAllocator<U>&) const {
        return false;
    }
};

using Buffer = std::vector<Scalar, AlignedAllocator<Scalar>>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One tape node: value, gradient slot, and the rule that pushes the
// gradient into its parents. Leaves have no backward rule.
struct Node {
    Shape shape;
    Buffer value;
    Buffer grad;  // allocated on first touch
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Buffer& ensure_grad();
};

// Shared handle to a node. Copies alias the same storage, which is what
// lets ops capture their inputs cheaply while the tape is alive.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, Buffer data, bool requires_grad = false);
    Tensor(Shape shape, const std::vector<Scalar>& data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, Scalar v, bool requires_grad = false);
    static Tensor from_rows(const std::vector<std::vector<Scalar>>& rows,
                            bool requires_grad = false);
    static Tensor scalar(Scalar v, bool requires_grad = false);
    // Gaussian init, mean 0 / given std.
    static Tensor randn(Shape shape, std::mt19937_64& rng, Scalar stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
    int rows() const;
    int cols() const;

    const Buffer& data() const { return node_->value; }
    Buffer& mutable_data() { return node_->value; }
    Scalar item() const;
    Scalar at(int r, int c) const;

    bool requires_grad() const { return node_->requires_grad; }
    const Buffer& grad() const;
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad();

    // Value copy with no tape attached.
    Tensor detach() const;
    bool all_finite() const;

    // Reverse pass from a scalar. Frees the tape edges afterwards, so a
    // graph can be backpropagated once.
    void backward();

    std::shared_ptr<Node>& node() { return node_; }
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    std::shared_ptr<Node> node_;

    friend Tensor make_op(Shape shape, Buffer value, std::vector<Tensor> parents,
                          std::function<void(Node&)> backward);
};

// Named trainable tensor. The optimizer is the only thing that writes it.
struct Parameter {
    std::string name;
    Tensor tensor;

    Parameter() = default;
    Parameter(std::string n, Tensor t) : name(std::move(n)), tensor(std::move(t)) {
        tensor.node()->requires_grad = true;
    }
};

// ---------------------------------------------------------------------------
// Ops. All build tape nodes unless stated otherwise.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise binary ops. `b` may match `a`'s shape, be a (1,N) row
// broadcast over a's rows (add/sub only), or be a 1-element scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar c);

Tensor sum_all(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // (M,N) -> (1,N)

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int start, int len);
Tensor slice_cols(const Tensor& a, int start, int len);
Tensor gather_rows(const Tensor& a, const std::vector<int>& indices);
Tensor reshape(const Tensor& a, Shape shape);

// Max-subtracted softmax over the last axis; rows sum to 1 within 1e-12.
Tensor softmax_lastaxis(const Tensor& x);

Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation, pinned by tests
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // strictly positive inputs

// Normalizes each last-axis slice to mean 0 / var 1, then applies the
// affine (gamma, beta). gamma/beta are (1,n) where n is the last axis.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Scalar eps = 1e-5);

// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Indices of the K largest entries, descending by value, ties to the lower
// index. Not differentiable; no tape node.
std::vector<int> topk_indices(const Tensor& x, int k);

// ---------------------------------------------------------------------------
// Finite-difference verification.
// ---------------------------------------------------------------------------

struct GradcheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    bool ok = true;          // false when a gradient came out non-finite
    std::string message;
};

// Compares analytic gradients of the scalar f() against central differences
// (step h) for every element of every parameter. f must be deterministic and
// rebuild its graph on each call.
GradcheckReport gradcheck(const std::function<Tensor()>& f,
                          const std::vector<Parameter*>& params,
                          double h = 1e-5);

}  // namespace emofuse::diff
