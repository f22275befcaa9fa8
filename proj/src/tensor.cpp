#include "koopkal/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace koopkal {

namespace {

#ifdef NDEBUG
std::atomic<FiniteCheckMode> g_finite_mode{FiniteCheckMode::LossOnly};
#else
std::atomic<FiniteCheckMode> g_finite_mode{FiniteCheckMode::All};
#endif

thread_local int g_no_grad_depth = 0;

bool values_finite(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

void check_output_finite(const TensorNode& n) {
    if (g_finite_mode.load(std::memory_order_relaxed) != FiniteCheckMode::All) return;
    if (!values_finite(n.value)) {
        throw NumericError(std::string("non-finite output of op '") + n.op + "'");
    }
}

std::shared_ptr<TensorNode> make_leaf(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

std::shared_ptr<TensorNode> make_result(const char* op, Shape shape, std::vector<double> value,
                                        std::vector<std::shared_ptr<TensorNode>> parents,
                                        std::function<void(TensorNode&)> backward_fn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool track = grad_enabled();
    bool need = false;
    if (track) {
        for (const auto& p : parents) need = need || p->requires_grad;
    }
    if (track && need) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    check_output_finite(*n);
    return n;
}

// ---- shape/broadcast helpers ----

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Pads `s` with leading ones to rank r.
Shape pad_shape(const Shape& s, size_t r) {
    Shape out(r, 1);
    std::copy(s.begin(), s.end(), out.begin() + (r - s.size()));
    return out;
}

// Restricted broadcast: identical, scalar, trailing suffix, or equal rank
// with explicit 1s. Returns the output shape or throws.
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    if (same_shape(a, b)) return a;
    if (shape_numel(a) == 1) return b;
    if (shape_numel(b) == 1) return a;
    if (a.size() == b.size()) {
        Shape out(a.size());
        for (size_t i = 0; i < a.size(); ++i) {
            if (a[i] == b[i]) out[i] = a[i];
            else if (a[i] == 1) out[i] = b[i];
            else if (b[i] == 1) out[i] = a[i];
            else
                throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                                 " vs " + shape_str(b));
        }
        return out;
    }
    const Shape& big = a.size() > b.size() ? a : b;
    const Shape& small = a.size() > b.size() ? b : a;
    // unequal rank: the smaller shape must be an exact trailing suffix
    for (size_t i = 0; i < small.size(); ++i) {
        if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) {
            throw ShapeError(std::string(op) + ": shape " + shape_str(small) +
                             " is not a trailing suffix of " + shape_str(big) +
                             "; reshape explicitly for other broadcasts");
        }
    }
    return big;
}

std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

// Strides of `s` viewed inside the (same-rank) broadcast shape: 0 where
// the source dim is 1 and the output dim is larger.
std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    Shape ps = pad_shape(s, out.size());
    auto st = row_major_strides(ps);
    for (size_t i = 0; i < out.size(); ++i) {
        if (ps[i] == 1 && out[i] != 1) st[i] = 0;
    }
    return st;
}

// Walks all indices of `shape`, calling fn(out_flat, a_off, b_off).
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, F&& fn) {
    const size_t r = out.size();
    const int64_t n = shape_numel(out);
    if (r == 0) {
        fn(0, 0, 0);
        return;
    }
    std::vector<int64_t> idx(r, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t o = 0; o < n; ++o) {
        fn(o, oa, ob);
        for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
            ++idx[i];
            oa += sa[i];
            ob += sb[i];
            if (idx[i] < out[i]) break;
            idx[i] = 0;
            oa -= sa[i] * out[i];
            ob -= sb[i] * out[i];
        }
    }
}

// ---- gemm kernels (C += op(A) * op(B)) ----

void gemm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    // C(m,n) += A(m,k) * B(n,k)^T
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

void gemm_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    // C(m,n) += A(k,m)^T * B(k,n)
    for (int64_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

FiniteCheckMode finite_check_mode() { return g_finite_mode.load(std::memory_order_relaxed); }
void set_finite_check_mode(FiniteCheckMode mode) { g_finite_mode.store(mode); }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

// ---- Tensor basics ----

TensorNode& Tensor::node() const {
    if (!node_) throw ShapeError("use of undefined tensor");
    return *node_;
}

Tensor Tensor::zeros(Shape shape) {
    auto n = shape_numel(shape);
    return wrap(make_leaf(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::ones(Shape shape) {
    auto n = shape_numel(shape);
    return wrap(make_leaf(std::move(shape), std::vector<double>(n, 1.0)));
}

Tensor Tensor::full(Shape shape, double fill) {
    auto n = shape_numel(shape);
    return wrap(make_leaf(std::move(shape), std::vector<double>(n, fill)));
}

Tensor Tensor::scalar(double v) { return wrap(make_leaf({}, {v})); }

Tensor Tensor::eye(int64_t d) {
    std::vector<double> v(d * d, 0.0);
    for (int64_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
    return wrap(make_leaf({d, d}, std::move(v)));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
        throw ShapeError("from_vector: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
    }
    return wrap(make_leaf(std::move(shape), std::move(data)));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double mean, double stddev) {
    auto n = shape_numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(mean, stddev);
    return wrap(make_leaf(std::move(shape), std::move(v)));
}

int64_t Tensor::size(int64_t axis) const {
    const auto& s = node().shape;
    if (axis < 0) axis += static_cast<int64_t>(s.size());
    if (axis < 0 || axis >= static_cast<int64_t>(s.size())) {
        throw ShapeError("size: axis out of range for shape " + shape_str(s));
    }
    return s[axis];
}

Tensor& Tensor::set_requires_grad(bool v) {
    auto& n = node();
    if (v && !n.is_leaf()) throw ShapeError("requires_grad can only be toggled on leaf tensors");
    n.requires_grad = v;
    return *this;
}

std::span<double> Tensor::data_mut() {
    auto& n = node();
    if (!n.is_leaf()) throw ShapeError("in-place mutation of a non-leaf tensor");
    return n.value;
}

std::span<const double> Tensor::grad() const {
    const auto& n = node();
    if (n.grad.size() != n.value.size()) {
        throw ShapeError("grad accessed before backward populated it");
    }
    return n.grad;
}

void Tensor::zero_grad() {
    auto& n = node();
    n.grad.assign(n.value.size(), 0.0);
}

double Tensor::item() const {
    const auto& n = node();
    if (n.numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(n.shape));
    return n.value[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    const auto& n = node();
    if (idx.size() != n.shape.size()) {
        throw ShapeError("at(): rank mismatch for shape " + shape_str(n.shape));
    }
    int64_t off = 0;
    auto strides = row_major_strides(n.shape);
    size_t i = 0;
    for (int64_t v : idx) {
        if (v < 0 || v >= n.shape[i]) throw ShapeError("at(): index out of range");
        off += v * strides[i++];
    }
    return n.value[off];
}

Tensor Tensor::detach() const {
    const auto& n = node();
    return wrap(make_leaf(n.shape, n.value));
}

bool Tensor::all_finite() const { return values_finite(node().value); }

void Tensor::backward() const {
    auto& loss = node();
    if (loss.numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape));
    }
    if (loss.is_leaf()) {
        throw ShapeError("backward: loss is detached from any graph");
    }
    if (!values_finite(loss.value)) {
        throw NumericError("backward: loss is non-finite");
    }

    // iterative post-order DFS over requires_grad subgraph
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* n;
        size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({&loss});
    visited.insert(&loss);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    // interior grads are per-sweep scratch; leaf grads persist (accumulate)
    for (TensorNode* n : order) {
        if (!n->is_leaf()) {
            n->grad.assign(n->value.size(), 0.0);
        } else {
            n->grad_buf();
        }
    }
    loss.grad_buf()[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (!n->is_leaf()) n->backward_fn(*n);
    }
}

// ---- elementwise binary with broadcasting ----

namespace {

enum class BinKind { Add, Sub, Mul, Div };

Tensor binary_op(BinKind kind, const char* name, const Tensor& a, const Tensor& b) {
    const auto& an = a.node();
    const auto& bn = b.node();
    Shape out_shape = broadcast_shape(an.shape, bn.shape, name);
    auto sa = broadcast_strides(an.shape, out_shape);
    auto sb = broadcast_strides(bn.shape, out_shape);
    std::vector<double> out(shape_numel(out_shape));
    const auto& av = an.value;
    const auto& bv = bn.value;
    switch (kind) {
        case BinKind::Add:
            for_each_broadcast(out_shape, sa, sb,
                               [&](int64_t o, int64_t i, int64_t j) { out[o] = av[i] + bv[j]; });
            break;
        case BinKind::Sub:
            for_each_broadcast(out_shape, sa, sb,
                               [&](int64_t o, int64_t i, int64_t j) { out[o] = av[i] - bv[j]; });
            break;
        case BinKind::Mul:
            for_each_broadcast(out_shape, sa, sb,
                               [&](int64_t o, int64_t i, int64_t j) { out[o] = av[i] * bv[j]; });
            break;
        case BinKind::Div:
            for_each_broadcast(out_shape, sa, sb,
                               [&](int64_t o, int64_t i, int64_t j) { out[o] = av[i] / bv[j]; });
            break;
    }

    auto backward = [kind, out_shape, sa, sb](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& g = self.grad;
        double* ga = pa.requires_grad ? pa.grad_buf().data() : nullptr;
        double* gb = pb.requires_grad ? pb.grad_buf().data() : nullptr;
        const auto& av = pa.value;
        const auto& bv = pb.value;
        switch (kind) {
            case BinKind::Add:
                for_each_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t i, int64_t j) {
                    if (ga) ga[i] += g[o];
                    if (gb) gb[j] += g[o];
                });
                break;
            case BinKind::Sub:
                for_each_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t i, int64_t j) {
                    if (ga) ga[i] += g[o];
                    if (gb) gb[j] -= g[o];
                });
                break;
            case BinKind::Mul:
                for_each_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t i, int64_t j) {
                    if (ga) ga[i] += g[o] * bv[j];
                    if (gb) gb[j] += g[o] * av[i];
                });
                break;
            case BinKind::Div:
                for_each_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t i, int64_t j) {
                    if (ga) ga[i] += g[o] / bv[j];
                    if (gb) gb[j] -= g[o] * av[i] / (bv[j] * bv[j]);
                });
                break;
        }
    };
    return Tensor::wrap(make_result(name, std::move(out_shape), std::move(out),
                                    {a.node_ptr(), b.node_ptr()}, std::move(backward)));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Mul, "mul", a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Div, "div", a, b); }

Tensor scalar_mul(const Tensor& a, double s) {
    const auto& an = a.node();
    std::vector<double> out(an.value.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = an.value[i] * s;
    auto backward = [s](TensorNode& self) {
        auto& p = *self.parents[0];
        auto& gp = p.grad_buf();
        for (size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * s;
    };
    return Tensor::wrap(
        make_result("scalar_mul", an.shape, std::move(out), {a.node_ptr()}, std::move(backward)));
}

Tensor scalar_add(const Tensor& a, double s) {
    const auto& an = a.node();
    std::vector<double> out(an.value.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = an.value[i] + s;
    auto backward = [](TensorNode& self) {
        auto& gp = self.parents[0]->grad_buf();
        for (size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
    };
    return Tensor::wrap(
        make_result("scalar_add", an.shape, std::move(out), {a.node_ptr()}, std::move(backward)));
}

Tensor neg(const Tensor& a) { return scalar_mul(a, -1.0); }

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& an = a.node();
    const auto& bn = b.node();
    const auto ar = an.shape.size();
    const auto br = bn.shape.size();
    if ((ar != 2 && ar != 3) || (br != 2 && br != 3)) {
        throw ShapeError("matmul: operands must be rank 2 or 3, got " + shape_str(an.shape) +
                         " and " + shape_str(bn.shape));
    }
    const bool a_batched = ar == 3;
    const bool b_batched = br == 3;
    const int64_t m = an.shape[ar - 2], ka = an.shape[ar - 1];
    const int64_t kb = bn.shape[br - 2], n = bn.shape[br - 1];
    if (ka != kb) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(an.shape) + " vs " +
                         shape_str(bn.shape));
    }
    int64_t batch = 1;
    if (a_batched && b_batched) {
        if (an.shape[0] != bn.shape[0]) {
            throw ShapeError("matmul: batch dimensions differ, " + shape_str(an.shape) + " vs " +
                             shape_str(bn.shape));
        }
        batch = an.shape[0];
    } else if (a_batched) {
        batch = an.shape[0];
    } else if (b_batched) {
        batch = bn.shape[0];
    }
    const int64_t k = ka;
    Shape out_shape = (a_batched || b_batched) ? Shape{batch, m, n} : Shape{m, n};
    std::vector<double> out(shape_numel(out_shape), 0.0);
    for (int64_t t = 0; t < batch; ++t) {
        const double* ap = an.value.data() + (a_batched ? t * m * k : 0);
        const double* bp = bn.value.data() + (b_batched ? t * k * n : 0);
        gemm_nn(ap, bp, out.data() + t * m * n, m, k, n);
    }

    auto backward = [a_batched, b_batched, batch, m, k, n](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const double* g = self.grad.data();
        if (pa.requires_grad) {
            double* ga = pa.grad_buf().data();
            for (int64_t t = 0; t < batch; ++t) {
                const double* bp = pb.value.data() + (b_batched ? t * k * n : 0);
                gemm_nt(g + t * m * n, bp, ga + (a_batched ? t * m * k : 0), m, n, k);
            }
        }
        if (pb.requires_grad) {
            double* gb = pb.grad_buf().data();
            for (int64_t t = 0; t < batch; ++t) {
                const double* ap = pa.value.data() + (a_batched ? t * m * k : 0);
                gemm_tn(ap, g + t * m * n, gb + (b_batched ? t * k * n : 0), k, m, n);
            }
        }
    };
    return Tensor::wrap(make_result("matmul", std::move(out_shape), std::move(out),
                                    {a.node_ptr(), b.node_ptr()}, std::move(backward)));
}

// ---- data movement ----

Tensor permute(const Tensor& a, std::vector<int> axes) {
    const auto& an = a.node();
    const size_t r = an.shape.size();
    if (axes.size() != r) throw ShapeError("permute: axes rank mismatch");
    std::vector<bool> seen(r, false);
    for (int ax : axes) {
        if (ax < 0 || ax >= static_cast<int>(r) || seen[ax]) {
            throw ShapeError("permute: invalid axis list");
        }
        seen[ax] = true;
    }
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = an.shape[axes[i]];
    auto in_strides = row_major_strides(an.shape);
    // stride of output dim i in the input buffer
    std::vector<int64_t> gather(r);
    for (size_t i = 0; i < r; ++i) gather[i] = in_strides[axes[i]];

    const int64_t total = shape_numel(out_shape);
    std::vector<double> out(total);
    std::vector<int64_t> idx(r, 0);
    int64_t src = 0;
    std::vector<int64_t> src_map(total);
    for (int64_t o = 0; o < total; ++o) {
        src_map[o] = src;
        out[o] = an.value[src];
        for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
            ++idx[i];
            src += gather[i];
            if (idx[i] < out_shape[i]) break;
            idx[i] = 0;
            src -= gather[i] * out_shape[i];
        }
    }
    auto backward = [src_map = std::move(src_map)](TensorNode& self) {
        auto& gp = self.parents[0]->grad_buf();
        for (size_t o = 0; o < src_map.size(); ++o) gp[src_map[o]] += self.grad[o];
    };
    return Tensor::wrap(make_result("permute", std::move(out_shape), std::move(out),
                                    {a.node_ptr()}, std::move(backward)));
}

Tensor transpose(const Tensor& a) {
    const size_t r = a.node().shape.size();
    if (r < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(a.shape()));
    std::vector<int> axes(r);
    for (size_t i = 0; i < r; ++i) axes[i] = static_cast<int>(i);
    std::swap(axes[r - 1], axes[r - 2]);
    return permute(a, axes);
}

Tensor reshape(const Tensor& a, Shape shape) {
    const auto& an = a.node();
    if (shape_numel(shape) != an.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(an.shape) + " as " +
                         shape_str(shape));
    }
    std::vector<double> out = an.value;
    auto backward = [](TensorNode& self) {
        auto& gp = self.parents[0]->grad_buf();
        for (size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
    };
    return Tensor::wrap(
        make_result("reshape", std::move(shape), std::move(out), {a.node_ptr()}, std::move(backward)));
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t stop) {
    const auto& an = a.node();
    const int r = static_cast<int>(an.shape.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of range");
    const int64_t len = an.shape[axis];
    if (start < 0 || stop > len || start >= stop) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(stop) +
                         ") invalid for axis of size " + std::to_string(len));
    }
    Shape out_shape = an.shape;
    out_shape[axis] = stop - start;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= an.shape[i];
    for (int i = axis + 1; i < r; ++i) inner *= an.shape[i];
    const int64_t width = stop - start;
    std::vector<double> out(outer * width * inner);
    for (int64_t o = 0; o < outer; ++o) {
        const double* src = an.value.data() + (o * len + start) * inner;
        double* dst = out.data() + o * width * inner;
        std::memcpy(dst, src, sizeof(double) * width * inner);
    }
    auto backward = [outer, inner, width, len, start](TensorNode& self) {
        auto& gp = self.parents[0]->grad_buf();
        const double* g = self.grad.data();
        for (int64_t o = 0; o < outer; ++o) {
            double* dst = gp.data() + (o * len + start) * inner;
            const double* src = g + o * width * inner;
            for (int64_t i = 0; i < width * inner; ++i) dst[i] += src[i];
        }
    };
    return Tensor::wrap(
        make_result("slice", std::move(out_shape), std::move(out), {a.node_ptr()}, std::move(backward)));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const auto& first = parts[0].node();
    const int r = static_cast<int>(first.shape.size());
    int ax = axis < 0 ? axis + r : axis;
    if (ax < 0 || ax >= r) throw ShapeError("concat: axis out of range");
    Shape out_shape = first.shape;
    int64_t total_axis = 0;
    for (const auto& p : parts) {
        const auto& s = p.node().shape;
        if (static_cast<int>(s.size()) != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i) {
            if (i != ax && s[i] != first.shape[i]) {
                throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " +
                                 shape_str(first.shape));
            }
        }
        total_axis += s[ax];
    }
    out_shape[ax] = total_axis;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= out_shape[i];
    for (int i = ax + 1; i < r; ++i) inner *= out_shape[i];
    std::vector<double> out(shape_numel(out_shape));
    std::vector<int64_t> widths;
    widths.reserve(parts.size());
    for (const auto& p : parts) widths.push_back(p.node().shape[ax]);
    int64_t offset = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& v = parts[pi].node().value;
        const int64_t w = widths[pi];
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(out.data() + (o * total_axis + offset) * inner,
                        v.data() + o * w * inner, sizeof(double) * w * inner);
        }
        offset += w;
    }
    std::vector<std::shared_ptr<TensorNode>> parents;
    parents.reserve(parts.size());
    for (const auto& p : parts) parents.push_back(p.node_ptr());
    auto backward = [outer, inner, total_axis, widths](TensorNode& self) {
        const double* g = self.grad.data();
        int64_t offset = 0;
        for (size_t pi = 0; pi < self.parents.size(); ++pi) {
            const int64_t w = widths[pi];
            auto& pn = *self.parents[pi];
            if (pn.requires_grad) {
                double* gp = pn.grad_buf().data();
                for (int64_t o = 0; o < outer; ++o) {
                    const double* src = g + (o * total_axis + offset) * inner;
                    double* dst = gp + o * w * inner;
                    for (int64_t i = 0; i < w * inner; ++i) dst[i] += src[i];
                }
            }
            offset += w;
        }
    };
    return Tensor::wrap(make_result("concat", std::move(out_shape), std::move(out),
                                    std::move(parents), std::move(backward)));
}

// ---- reductions ----

Tensor sum_all(const Tensor& a) {
    const auto& an = a.node();
    double s = 0.0;
    for (double x : an.value) s += x;
    auto backward = [](TensorNode& self) {
        auto& gp = self.parents[0]->grad_buf();
        const double g = self.grad[0];
        for (auto& x : gp) x += g;
    };
    return Tensor::wrap(make_result("sum", {}, {s}, {a.node_ptr()}, std::move(backward)));
}

Tensor mean_all(const Tensor& a) {
    const auto& an = a.node();
    const double inv = 1.0 / static_cast<double>(an.numel());
    double s = 0.0;
    for (double x : an.value) s += x;
    s *= inv;
    auto backward = [inv](TensorNode& self) {
        auto& gp = self.parents[0]->grad_buf();
        const double g = self.grad[0] * inv;
        for (auto& x : gp) x += g;
    };
    return Tensor::wrap(make_result("mean", {}, {s}, {a.node_ptr()}, std::move(backward)));
}

// ---- elementwise unary ----

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
    const auto& an = a.node();
    std::vector<double> out(an.value.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(an.value[i]);
    auto backward = [bwd, out_copy = out](TensorNode& self) {
        auto& p = *self.parents[0];
        auto& gp = p.grad_buf();
        for (size_t i = 0; i < gp.size(); ++i) {
            gp[i] += self.grad[i] * bwd(p.value[i], out_copy[i]);
        }
    };
    return Tensor::wrap(
        make_result(name, an.shape, std::move(out), {a.node_ptr()}, std::move(backward)));
}

double stable_softplus(double x) {
    if (x > 30.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Tensor exp(const Tensor& a) {
    return unary_op("exp", a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double x : a.node().value) {
        if (!(x > 0.0)) throw NumericError("log: non-positive input");
    }
    return unary_op("log", a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
    return unary_op("tanh", a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
    return unary_op("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& a) {
    return unary_op("softplus", a, [](double x) { return stable_softplus(x); },
                    [](double x, double) { return sigmoid(x); });
}

// ---- softmax / layer norm ----

Tensor softmax(const Tensor& a, int axis) {
    const auto& an = a.node();
    const int r = static_cast<int>(an.shape.size());
    int ax = axis < 0 ? axis + r : axis;
    if (ax < 0 || ax >= r) throw ShapeError("softmax: axis out of range");
    int64_t outer = 1, inner = 1;
    const int64_t len = an.shape[ax];
    for (int i = 0; i < ax; ++i) outer *= an.shape[i];
    for (int i = ax + 1; i < r; ++i) inner *= an.shape[i];
    std::vector<double> out(an.value.size());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * len * inner + in;
            double mx = -1e300;
            for (int64_t j = 0; j < len; ++j) mx = std::max(mx, an.value[base + j * inner]);
            double z = 0.0;
            for (int64_t j = 0; j < len; ++j) {
                const double e = std::exp(an.value[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            const double invz = 1.0 / z;
            for (int64_t j = 0; j < len; ++j) out[base + j * inner] *= invz;
        }
    }
    auto backward = [outer, inner, len, y = out](TensorNode& self) {
        auto& gp = self.parents[0]->grad_buf();
        const auto& g = self.grad;
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * len * inner + in;
                double dot = 0.0;
                for (int64_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                for (int64_t j = 0; j < len; ++j) {
                    const int64_t ix = base + j * inner;
                    gp[ix] += y[ix] * (g[ix] - dot);
                }
            }
        }
    };
    return Tensor::wrap(
        make_result("softmax", an.shape, std::move(out), {a.node_ptr()}, std::move(backward)));
}

Tensor layer_norm(const Tensor& a, double eps) {
    const auto& an = a.node();
    if (an.shape.empty()) throw ShapeError("layer_norm: rank-0 input");
    const int64_t len = an.shape.back();
    const int64_t rows = an.numel() / len;
    std::vector<double> out(an.value.size());
    std::vector<double> inv_std(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = an.value.data() + r * len;
        double m = 0.0;
        for (int64_t j = 0; j < len; ++j) m += x[j];
        m /= static_cast<double>(len);
        double v = 0.0;
        for (int64_t j = 0; j < len; ++j) v += (x[j] - m) * (x[j] - m);
        v /= static_cast<double>(len);
        const double is = 1.0 / std::sqrt(v + eps);
        inv_std[r] = is;
        double* yrow = out.data() + r * len;
        for (int64_t j = 0; j < len; ++j) yrow[j] = (x[j] - m) * is;
    }
    auto backward = [rows, len, inv_std = std::move(inv_std), y = out](TensorNode& self) {
        auto& gp = self.parents[0]->grad_buf();
        const auto& g = self.grad;
        const double n = static_cast<double>(len);
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t base = r * len;
            double gsum = 0.0, gysum = 0.0;
            for (int64_t j = 0; j < len; ++j) {
                gsum += g[base + j];
                gysum += g[base + j] * y[base + j];
            }
            const double gmean = gsum / n;
            const double gymean = gysum / n;
            for (int64_t j = 0; j < len; ++j) {
                gp[base + j] += inv_std[r] * (g[base + j] - gmean - y[base + j] * gymean);
            }
        }
    };
    return Tensor::wrap(
        make_result("layer_norm", an.shape, std::move(out), {a.node_ptr()}, std::move(backward)));
}

// ---- diag ----

Tensor diag_part(const Tensor& a) {
    const auto& an = a.node();
    const size_t r = an.shape.size();
    if (r < 2 || an.shape[r - 1] != an.shape[r - 2]) {
        throw ShapeError("diag_part: needs trailing square matrix dims, got " +
                         shape_str(an.shape));
    }
    const int64_t d = an.shape[r - 1];
    const int64_t batch = an.numel() / (d * d);
    Shape out_shape(an.shape.begin(), an.shape.end() - 1);
    std::vector<double> out(batch * d);
    for (int64_t t = 0; t < batch; ++t) {
        for (int64_t i = 0; i < d; ++i) out[t * d + i] = an.value[t * d * d + i * d + i];
    }
    auto backward = [batch, d](TensorNode& self) {
        auto& gp = self.parents[0]->grad_buf();
        for (int64_t t = 0; t < batch; ++t) {
            for (int64_t i = 0; i < d; ++i) gp[t * d * d + i * d + i] += self.grad[t * d + i];
        }
    };
    return Tensor::wrap(make_result("diag_part", std::move(out_shape), std::move(out),
                                    {a.node_ptr()}, std::move(backward)));
}

Tensor diag_embed(const Tensor& a) {
    const auto& an = a.node();
    if (an.shape.empty()) throw ShapeError("diag_embed: rank-0 input");
    const int64_t d = an.shape.back();
    const int64_t batch = an.numel() / d;
    Shape out_shape = an.shape;
    out_shape.push_back(d);
    std::vector<double> out(batch * d * d, 0.0);
    for (int64_t t = 0; t < batch; ++t) {
        for (int64_t i = 0; i < d; ++i) out[t * d * d + i * d + i] = an.value[t * d + i];
    }
    auto backward = [batch, d](TensorNode& self) {
        auto& gp = self.parents[0]->grad_buf();
        for (int64_t t = 0; t < batch; ++t) {
            for (int64_t i = 0; i < d; ++i) gp[t * d + i] += self.grad[t * d * d + i * d + i];
        }
    };
    return Tensor::wrap(make_result("diag_embed", std::move(out_shape), std::move(out),
                                    {a.node_ptr()}, std::move(backward)));
}

// ---- dispatcher ----

const char* op_kind_name(OpKind kind) {
    switch (kind) {
        case OpKind::Matmul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::ScalarMul: return "scalar_mul";
        case OpKind::Transpose: return "transpose";
        case OpKind::Permute: return "permute";
        case OpKind::Reshape: return "reshape";
        case OpKind::Slice: return "slice";
        case OpKind::Concat: return "concat";
        case OpKind::SumAll: return "sum";
        case OpKind::MeanAll: return "mean";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Tanh: return "tanh";
        case OpKind::Relu: return "relu";
        case OpKind::Softplus: return "softplus";
        case OpKind::Softmax: return "softmax";
        case OpKind::LayerNorm: return "layer_norm";
        case OpKind::DiagPart: return "diag_part";
        case OpKind::DiagEmbed: return "diag_embed";
    }
    return "?";
}

Tensor apply_primitive(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
    auto need = [&](size_t n) {
        if (inputs.size() != n) {
            throw ShapeError(std::string(op_kind_name(kind)) + ": expected " + std::to_string(n) +
                             " inputs, got " + std::to_string(inputs.size()));
        }
    };
    switch (kind) {
        case OpKind::Matmul: need(2); return matmul(inputs[0], inputs[1]);
        case OpKind::Add: need(2); return add(inputs[0], inputs[1]);
        case OpKind::Sub: need(2); return sub(inputs[0], inputs[1]);
        case OpKind::Mul: need(2); return mul(inputs[0], inputs[1]);
        case OpKind::Div: need(2); return div(inputs[0], inputs[1]);
        case OpKind::ScalarMul: need(1); return scalar_mul(inputs[0], attrs.scalar);
        case OpKind::Transpose: need(1); return transpose(inputs[0]);
        case OpKind::Permute: need(1); return permute(inputs[0], attrs.perm);
        case OpKind::Reshape: need(1); return reshape(inputs[0], attrs.shape);
        case OpKind::Slice: need(1); return slice(inputs[0], attrs.axis, attrs.start, attrs.stop);
        case OpKind::Concat: return concat(inputs, attrs.axis);
        case OpKind::SumAll: need(1); return sum_all(inputs[0]);
        case OpKind::MeanAll: need(1); return mean_all(inputs[0]);
        case OpKind::Exp: need(1); return exp(inputs[0]);
        case OpKind::Log: need(1); return log(inputs[0]);
        case OpKind::Tanh: need(1); return tanh(inputs[0]);
        case OpKind::Relu: need(1); return relu(inputs[0]);
        case OpKind::Softplus: need(1); return softplus(inputs[0]);
        case OpKind::Softmax: need(1); return softmax(inputs[0], attrs.axis);
        case OpKind::LayerNorm: need(1); return layer_norm(inputs[0], attrs.eps);
        case OpKind::DiagPart: need(1); return diag_part(inputs[0]);
        case OpKind::DiagEmbed: need(1); return diag_embed(inputs[0]);
    }
    throw ShapeError("apply_primitive: unknown op kind");
}

// ---- finite-difference gradient check ----

FdReport finite_difference_check(const std::function<Tensor()>& f,
                                 std::vector<NamedParam>& params, double h, double tol) {
    if (!(h > 0.0)) throw ShapeError("finite_difference_check: h must be positive");
    for (auto& p : params) {
        if (!p.tensor.requires_grad()) {
            throw ShapeError("finite_difference_check: parameter '" + p.name +
                             "' does not require grad");
        }
        p.tensor.zero_grad();
    }

    Tensor l0 = f();
    Tensor l1 = f();
    uint64_t b0, b1;
    double v0 = l0.item(), v1 = l1.item();
    std::memcpy(&b0, &v0, 8);
    std::memcpy(&b1, &v1, 8);
    if (b0 != b1) {
        throw NumericError("finite_difference_check: f is not deterministic across calls");
    }
    l1.backward();

    FdReport report;
    for (auto& p : params) {
        std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
        auto data = p.tensor.data_mut();
        FdEntry entry;
        entry.name = p.name;
        for (size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            double fp;
            {
                NoGradGuard ng;
                fp = f().item();
            }
            data[i] = orig - h;
            double fm;
            {
                NoGradGuard ng;
                fm = f().item();
            }
            data[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
            const double rel = std::abs(analytic[i] - numeric) / denom;
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        entry.pass = entry.max_rel_err <= tol;
        report.worst_rel_err = std::max(report.worst_rel_err, entry.max_rel_err);
        report.all_pass = report.all_pass && entry.pass;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace koopkal
