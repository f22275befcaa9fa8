#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "koopkal/common.hpp"
#include "koopkal/rng.hpp"

namespace koopkal {

class Rng;

// Scan policy for non-finite detection. All: every primitive output is
// scanned (default in debug builds). LossOnly: only backward() scans the
// loss value (default in release builds).
enum class FiniteCheckMode { All, LossOnly };

FiniteCheckMode finite_check_mode();
void set_finite_check_mode(FiniteCheckMode mode);

// While a guard is alive on this thread, primitives produce detached
// outputs (no graph recording). Used for evaluation and long Monte-Carlo
// suites where the tape would only burn memory.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    bool requires_grad = false;
    std::vector<double> grad;  // sized lazily; persists across backward calls for leaves
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // null for leaves
    const char* op = "leaf";

    bool is_leaf() const { return !backward_fn; }
    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    std::vector<double>& grad_buf() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

// Dense float64 tensor participating in a reverse-mode autodiff graph.
// Row-major contiguous storage; value semantics on the handle, shared
// ownership of the node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double fill);
    static Tensor scalar(double v);
    static Tensor eye(int64_t d);
    static Tensor from_vector(Shape shape, std::vector<double> data);
    static Tensor randn(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node().shape; }
    int64_t dim() const { return static_cast<int64_t>(node().shape.size()); }
    int64_t size(int64_t axis) const;
    int64_t numel() const { return node().numel(); }

    bool requires_grad() const { return node().requires_grad; }
    Tensor& set_requires_grad(bool v);

    std::span<const double> data() const { return node().value; }
    // Mutation is only allowed on leaves (no recorded history to invalidate).
    std::span<double> data_mut();

    bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
    std::span<const double> grad() const;
    void zero_grad();

    double item() const;
    double at(std::initializer_list<int64_t> idx) const;

    // Reverse-mode sweep from a scalar, graph-attached loss. Populates the
    // grad of every reachable requires_grad tensor; repeated calls
    // accumulate into leaf grads.
    void backward() const;

    // Copy of the values as a fresh leaf, cut off from the graph.
    Tensor detach() const;

    bool all_finite() const;

    TensorNode& node() const;
    const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

    static Tensor wrap(std::shared_ptr<TensorNode> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<TensorNode> node_;
};

// ---- primitives ------------------------------------------------------

// matmul supports 2D x 2D, and batched forms where either side carries a
// leading batch axis: (B,a,b)x(b,c), (a,b)x(B,b,c), (B,a,b)x(B,b,c).
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise with restricted broadcasting: identical shapes, a scalar on
// either side, a trailing-suffix shape, or equal-rank shapes with explicit
// size-1 axes. Anything else needs an explicit reshape first.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scalar_mul(const Tensor& a, double s);
Tensor scalar_add(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor transpose(const Tensor& a);                       // swaps the last two axes
Tensor permute(const Tensor& a, std::vector<int> axes);  // general axis permutation
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t stop);
Tensor concat(const std::vector<Tensor>& parts, int axis);

Tensor sum_all(const Tensor& a);   // rank-0 scalar
Tensor mean_all(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // errors on non-positive input
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);
Tensor layer_norm(const Tensor& a, double eps = 1e-5);  // normalize over the last axis

Tensor diag_part(const Tensor& a);             // (...,d,d) -> (...,d)
Tensor diag_embed(const Tensor& a);            // (...,d) -> (...,d,d)

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scalar_mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scalar_mul(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- uniform dispatch ------------------------------------------------

enum class OpKind {
    Matmul, Add, Sub, Mul, Div, ScalarMul, Transpose, Permute, Reshape,
    Slice, Concat, SumAll, MeanAll, Exp, Log, Tanh, Relu, Softplus,
    Softmax, LayerNorm, DiagPart, DiagEmbed,
};

struct OpAttrs {
    double scalar = 0.0;
    int axis = 0;
    int64_t start = 0;
    int64_t stop = 0;
    std::vector<int> perm;
    Shape shape;
    double eps = 1e-5;
};

Tensor apply_primitive(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});
const char* op_kind_name(OpKind kind);

// ---- gradient verification -------------------------------------------

struct FdEntry {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = true;
};

struct FdReport {
    std::vector<FdEntry> entries;
    double worst_rel_err = 0.0;
    bool all_pass = true;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// Compares analytic gradients of a deterministic scalar-valued function
// against central finite differences, parameter by parameter. f must
// rebuild its graph from the current parameter values on every call; it is
// invoked twice up front and must reproduce the same value bit for bit.
FdReport finite_difference_check(const std::function<Tensor()>& f,
                                 std::vector<NamedParam>& params,
                                 double h, double tol);

}  // namespace koopkal
