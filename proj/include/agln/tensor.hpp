#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "agln/error.hpp"
#include "agln/parallel.hpp"

namespace agln {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream o;
    o << '[';
    for (std::size_t i = 0; i < s.size(); ++i) o << (i ? "x" : "") << s[i];
    o << ']';
    return o.str();
}

template <typename S>
class Tape;

// One value in the computation graph. Owned via shared_ptr; Tensor<S> is the
// cheap handle type used everywhere else. grad stays empty until something
// flows into it.
template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;
    bool requires_grad = false;
    bool leaf = false;
    std::string name;
    const Tape<S>* producer = nullptr;  // tape that recorded the producing step

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
    }
};

// Value handle over a shared node. Tensors are immutable once created except
// for gradient accumulation; mutating `data()` directly is reserved for
// leaf setup and finite-difference probes.
template <typename S>
class Tensor {
public:
    using Node = TensorNode<S>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape) { return filled(std::move(shape), S(0)); }

    static Tensor filled(Shape shape, S v) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value.assign(static_cast<std::size_t>(numel_of(n->shape)), v);
        n->leaf = true;
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<S> data) {
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->leaf = true;
        return Tensor(std::move(n));
    }

    static Tensor scalar(S v) { return from({1}, {v}); }

    // Trainable leaf.
    static Tensor param(std::string name, Shape shape, std::vector<S> data) {
        Tensor t = from(std::move(shape), std::move(data));
        t.node_->requires_grad = true;
        t.node_->name = std::move(name);
        return t;
    }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int extent(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
    std::int64_t numel() const { return node_->numel(); }
    const std::string& name() const { return node_->name; }

    S* data() { return node_->value.data(); }
    const S* data() const { return node_->value.data(); }
    std::vector<S>& values() { return node_->value; }
    const std::vector<S>& values() const { return node_->value; }

    S item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    const std::vector<S>& grad() const { return node_->grad; }
    std::vector<S>& grad() { return node_->grad; }
    void zero_grad() { node_->zero_grad(); }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

template <typename S>
inline thread_local Tape<S>* g_active_tape = nullptr;

// When non-null, relu() appends the sign of every input it sees. The
// gradient checker compares sign streams across perturbed evaluations to
// detect kink crossings.
inline thread_local std::vector<std::uint8_t>* g_relu_sign_trace = nullptr;

// Ordered record of executed primitives. Steps are appended in execution
// order, so inputs of any step were produced earlier or are leaves; the
// backward sweep walks the record once, in reverse.
template <typename S>
class Tape {
public:
    struct Step {
        const char* op;
        std::vector<std::shared_ptr<TensorNode<S>>> inputs;
        std::shared_ptr<TensorNode<S>> output;
        std::function<void()> backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(const char* op, std::vector<std::shared_ptr<TensorNode<S>>> inputs,
                const std::shared_ptr<TensorNode<S>>& output, std::function<void()> backward) {
        output->requires_grad = true;
        output->producer = this;
        steps_.push_back(Step{op, std::move(inputs), output, std::move(backward)});
    }

    std::size_t size() const { return steps_.size(); }
    void clear() { steps_.clear(); }

    // Seeds d loss / d loss = 1 and sweeps the record in reverse. Leaf
    // gradients accumulate across calls; internal gradients are reset per
    // call so repeated backward() adds exactly one more contribution.
    void backward(const Tensor<S>& loss) {
        if (loss.numel() != 1)
            throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (loss.node()->producer != this)
            throw ContractError("backward: loss was not produced on this tape");
        for (auto& st : steps_) {
            if (!st.output->leaf) st.output->zero_grad();
        }
        loss.node()->ensure_grad();
        loss.node()->grad[0] += S(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
            if (it->output->grad.empty()) continue;  // nothing flowed into this node
            it->backward();
        }
    }

private:
    std::vector<Step> steps_;
};

// RAII activation of a tape for the current thread.
template <typename S>
class TapeScope {
public:
    explicit TapeScope(Tape<S>& t) : prev_(g_active_tape<S>) { g_active_tape<S> = &t; }
    ~TapeScope() { g_active_tape<S> = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<S>* prev_;
};

namespace detail {

template <typename S>
bool tracking(std::initializer_list<const Tensor<S>*> ins) {
    if (g_active_tape<S> == nullptr) return false;
    for (const Tensor<S>* t : ins)
        if ((*t).requires_grad()) return true;
    return false;
}

template <typename S>
Tensor<S> make_out(Shape shape) {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->value.assign(static_cast<std::size_t>(numel_of(n->shape)), S(0));
    return Tensor<S>(std::move(n));
}

template <typename S>
void accumulate(const std::shared_ptr<TensorNode<S>>& n, std::int64_t i, S v) {
    n->grad[static_cast<std::size_t>(i)] += v;
}

template <typename S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
}

}  // namespace detail

// ---- elementwise primitives ------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape("add", a, b);
    Tensor<S> out = detail::make_out<S>(a.shape());
    const std::int64_t n = a.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (detail::tracking<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        g_active_tape<S>->record("add", {an, bn}, on, [an, bn, on, n] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape("sub", a, b);
    Tensor<S> out = detail::make_out<S>(a.shape());
    const std::int64_t n = a.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    if (detail::tracking<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        g_active_tape<S>->record("sub", {an, bn}, on, [an, bn, on, n] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) bn->grad[i] -= on->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape("mul", a, b);
    Tensor<S> out = detail::make_out<S>(a.shape());
    const std::int64_t n = a.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (detail::tracking<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        g_active_tape<S>->record("mul", {an, bn}, on, [an, bn, on, n] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->value[i];
            }
        });
    }
    return out;
}

// constant * tensor
template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = detail::make_out<S>(a.shape());
    const std::int64_t n = a.numel();
    const S* pa = a.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    if (detail::tracking<S>({&a})) {
        auto an = a.node(), on = out.node();
        g_active_tape<S>->record("scale", {an}, on, [an, on, n, c] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * c;
            }
        });
    }
    return out;
}

// learnable-scalar * tensor; the gate is a 1-element tensor and receives
// d loss / d gate = sum(g .* a).
template <typename S>
Tensor<S> scale_by(const Tensor<S>& a, const Tensor<S>& gate) {
    if (gate.numel() != 1)
        throw DimensionError("scale_by: gate must be a single scalar, got " + shape_str(gate.shape()));
    Tensor<S> out = detail::make_out<S>(a.shape());
    const std::int64_t n = a.numel();
    const S g = gate.item();
    const S* pa = a.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * g;
    if (detail::tracking<S>({&a, &gate})) {
        auto an = a.node(), gn = gate.node(), on = out.node();
        g_active_tape<S>->record("scale_by", {an, gn}, on, [an, gn, on, n] {
            const S gv = gn->value[0];
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * gv;
            }
            if (gn->requires_grad) {
                gn->ensure_grad();
                S acc = S(0);
                for (std::int64_t i = 0; i < n; ++i) acc += on->grad[i] * an->value[i];
                gn->grad[0] += acc;
            }
        });
    }
    return out;
}

// Subgradient at 0 is 0.
template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
    Tensor<S> out = detail::make_out<S>(a.shape());
    const std::int64_t n = a.numel();
    const S* pa = a.data();
    S* po = out.data();
    if (g_relu_sign_trace != nullptr) {
        for (std::int64_t i = 0; i < n; ++i)
            g_relu_sign_trace->push_back(pa[i] > S(0) ? 1 : 0);
    }
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] > S(0) ? pa[i] : S(0);
    if (detail::tracking<S>({&a})) {
        auto an = a.node(), on = out.node();
        g_active_tape<S>->record("relu", {an}, on, [an, on, n] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    if (an->value[i] > S(0)) an->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
inline S sigmoid_stable(S x) {
    if (x >= S(0)) {
        const S e = std::exp(-x);
        return S(1) / (S(1) + e);
    }
    const S e = std::exp(x);
    return e / (S(1) + e);
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
    Tensor<S> out = detail::make_out<S>(a.shape());
    const std::int64_t n = a.numel();
    const S* pa = a.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = sigmoid_stable(pa[i]);
    if (detail::tracking<S>({&a})) {
        auto an = a.node(), on = out.node();
        g_active_tape<S>->record("sigmoid", {an}, on, [an, on, n] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) {
                    const S s = on->value[i];
                    an->grad[i] += on->grad[i] * s * (S(1) - s);
                }
            }
        });
    }
    return out;
}

// ---- shape ops ---------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tensor<S> out = detail::make_out<S>(std::move(shape));
    std::copy(a.data(), a.data() + a.numel(), out.data());
    if (detail::tracking<S>({&a})) {
        auto an = a.node(), on = out.node();
        const std::int64_t n = a.numel();
        g_active_tape<S>->record("reshape", {an}, on, [an, on, n] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> transpose2(const Tensor<S>& a) {
    if (a.rank() != 2) throw DimensionError("transpose2: rank-2 tensor required, got " + shape_str(a.shape()));
    const int m = a.extent(0), n = a.extent(1);
    Tensor<S> out = detail::make_out<S>({n, m});
    const S* pa = a.data();
    S* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
    if (detail::tracking<S>({&a})) {
        auto an = a.node(), on = out.node();
        g_active_tape<S>->record("transpose2", {an}, on, [an, on, m, n] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[j * m + i];
            }
        });
    }
    return out;
}

// Concatenates along `axis`; all other extents must agree.
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const int rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw DimensionError("concat: axis out of range");
    Shape shape = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) throw DimensionError("concat: rank mismatch");
        for (int d = 0; d < rank; ++d)
            if (d != axis && p.extent(d) != shape[static_cast<std::size_t>(d)])
                throw DimensionError("concat: shapes " + shape_str(shape) + " and " +
                                     shape_str(p.shape()) + " differ off-axis");
        total += p.extent(axis);
    }
    shape[static_cast<std::size_t>(axis)] = total;

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= shape[static_cast<std::size_t>(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= shape[static_cast<std::size_t>(d)];

    Tensor<S> out = detail::make_out<S>(shape);
    S* po = out.data();
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t pa = static_cast<std::int64_t>(p.extent(axis)) * inner;
        const S* pp = p.data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(pp + o * pa, pp + (o + 1) * pa, po + o * total * inner + off);
        off += pa;
    }

    bool any = false;
    for (const auto& p : parts)
        if (p.requires_grad()) any = true;
    if (g_active_tape<S> != nullptr && any) {
        std::vector<std::shared_ptr<TensorNode<S>>> ins;
        for (const auto& p : parts) ins.push_back(p.node());
        auto on = out.node();
        const std::int64_t row = static_cast<std::int64_t>(total) * inner;
        g_active_tape<S>->record("concat", ins, on, [ins, on, outer, inner, row] {
            std::int64_t off2 = 0;
            for (const auto& in : ins) {
                const std::int64_t pa = static_cast<std::int64_t>(in->value.size()) / (outer ? outer : 1);
                if (in->requires_grad) {
                    in->ensure_grad();
                    for (std::int64_t o = 0; o < outer; ++o)
                        for (std::int64_t i = 0; i < pa; ++i)
                            in->grad[o * pa + i] += on->grad[o * row + off2 + i];
                }
                off2 += pa;
            }
        });
    }
    return out;
}

// ---- matmul -----------------------------------------------------------

namespace detail {

// C[m x n] += A[m x k] * B[k x n]; inner loop streams over n.
template <typename S>
void gemm_acc(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        S* crow = c + static_cast<std::int64_t>(i) * n;
        const S* arow = a + static_cast<std::int64_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const S av = arow[p];
            if (av == S(0)) continue;
            const S* brow = b + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B^T where Bt is [n x k]
template <typename S>
void gemm_bt_acc(const S* a, const S* bt, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* arow = a + static_cast<std::int64_t>(i) * k;
        S* crow = c + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const S* brow = bt + static_cast<std::int64_t>(j) * k;
            S acc = S(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[m x n] += A^T * B where At is [k x m], B is [k x n]
template <typename S>
void gemm_at_acc(const S* at, const S* b, S* c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const S* arow = at + static_cast<std::int64_t>(p) * m;
        const S* brow = b + static_cast<std::int64_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const S av = arow[i];
            if (av == S(0)) continue;
            S* crow = c + static_cast<std::int64_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// Standard matrix product for rank-2 tensors.
// d/da = g . b^T, d/db = a^T . g
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul: rank-2 tensors required, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    if (a.extent(1) != b.extent(0))
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor<S> out = detail::make_out<S>({m, n});
    detail::gemm_acc(a.data(), b.data(), out.data(), m, k, n);
    if (detail::tracking<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        g_active_tape<S>->record("matmul", {an, bn}, on, [an, bn, on, m, k, n] {
            if (an->requires_grad) {
                an->ensure_grad();
                detail::gemm_bt_acc(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::gemm_at_acc(an->value.data(), on->grad.data(), bn->grad.data(), k, m, n);
            }
        });
    }
    return out;
}

// Batched matmul: [B x m x k] . [B x k x n] -> [B x m x n].
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 3 || b.rank() != 3)
        throw DimensionError("bmm: rank-3 tensors required, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    if (a.extent(0) != b.extent(0) || a.extent(2) != b.extent(1))
        throw DimensionError("bmm: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                             " do not compose");
    const int bs = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
    Tensor<S> out = detail::make_out<S>({bs, m, n});
    const std::int64_t sa = static_cast<std::int64_t>(m) * k;
    const std::int64_t sb = static_cast<std::int64_t>(k) * n;
    const std::int64_t so = static_cast<std::int64_t>(m) * n;
    for (int i = 0; i < bs; ++i)
        detail::gemm_acc(a.data() + i * sa, b.data() + i * sb, out.data() + i * so, m, k, n);
    if (detail::tracking<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        g_active_tape<S>->record("bmm", {an, bn}, on, [an, bn, on, bs, m, k, n, sa, sb, so] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (int i = 0; i < bs; ++i)
                    detail::gemm_bt_acc(on->grad.data() + i * so, bn->value.data() + i * sb,
                                        an->grad.data() + i * sa, m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < bs; ++i)
                    detail::gemm_at_acc(an->value.data() + i * sa, on->grad.data() + i * so,
                                        bn->grad.data() + i * sb, k, m, n);
            }
        });
    }
    return out;
}

// Transpose of the trailing two axes of a rank-3 tensor.
template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& a) {
    if (a.rank() != 3) throw DimensionError("transpose_last2: rank-3 tensor required");
    const int bs = a.extent(0), m = a.extent(1), n = a.extent(2);
    Tensor<S> out = detail::make_out<S>({bs, n, m});
    const S* pa = a.data();
    S* po = out.data();
    for (int b = 0; b < bs; ++b) {
        const S* src = pa + static_cast<std::int64_t>(b) * m * n;
        S* dst = po + static_cast<std::int64_t>(b) * m * n;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    if (detail::tracking<S>({&a})) {
        auto an = a.node(), on = out.node();
        g_active_tape<S>->record("transpose_last2", {an}, on, [an, on, bs, m, n] {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (int b = 0; b < bs; ++b) {
                S* dst = an->grad.data() + static_cast<std::int64_t>(b) * m * n;
                const S* src = on->grad.data() + static_cast<std::int64_t>(b) * m * n;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) dst[i * n + j] += src[j * m + i];
            }
        });
    }
    return out;
}

// ---- softmax ----------------------------------------------------------

// Exp-normalizes each slice along `axis`, stabilized by max subtraction.
// Slice sums are 1 up to rounding for any finite input.
template <typename S>
Tensor<S> softmax_axis(const Tensor<S>& x, int axis) {
    if (axis < 0 || axis >= x.rank())
        throw DimensionError("softmax_axis: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(x.shape()));
    const Shape& shape = x.shape();
    const int extent = shape[static_cast<std::size_t>(axis)];
    std::int64_t inner = 1, outer = 1;
    for (int d = axis + 1; d < x.rank(); ++d) inner *= shape[static_cast<std::size_t>(d)];
    for (int d = 0; d < axis; ++d) outer *= shape[static_cast<std::size_t>(d)];

    Tensor<S> out = detail::make_out<S>(shape);
    const S* px = x.data();
    S* po = out.data();
    const std::int64_t stripe = static_cast<std::int64_t>(extent) * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * stripe + i;
            S mx = px[base];
            for (int e = 1; e < extent; ++e) mx = std::max(mx, px[base + e * inner]);
            if (!std::isfinite(static_cast<double>(mx)))
                throw NumericError("softmax_axis: non-finite input");
            S sum = S(0);
            for (int e = 0; e < extent; ++e) {
                const S v = std::exp(px[base + e * inner] - mx);
                po[base + e * inner] = v;
                sum += v;
            }
            for (int e = 0; e < extent; ++e) po[base + e * inner] /= sum;
        }
    }
    if (detail::tracking<S>({&x})) {
        auto xn = x.node(), on = out.node();
        g_active_tape<S>->record("softmax_axis", {xn}, on, [xn, on, outer, inner, extent, stripe] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t i = 0; i < inner; ++i) {
                    const std::int64_t base = o * stripe + i;
                    S dot = S(0);
                    for (int e = 0; e < extent; ++e)
                        dot += on->grad[base + e * inner] * on->value[base + e * inner];
                    for (int e = 0; e < extent; ++e) {
                        const std::int64_t ix = base + e * inner;
                        xn->grad[ix] += on->value[ix] * (on->grad[ix] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// ---- reductions -------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
    Tensor<S> out = detail::make_out<S>({1});
    const std::int64_t n = a.numel();
    const S* pa = a.data();
    S acc = S(0);
    for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
    out.data()[0] = acc;
    if (detail::tracking<S>({&a})) {
        auto an = a.node(), on = out.node();
        g_active_tape<S>->record("sum", {an}, on, [an, on, n] {
            if (!an->requires_grad) return;
            an->ensure_grad();
            const S g = on->grad[0];
            for (std::int64_t i = 0; i < n; ++i) an->grad[i] += g;
        });
    }
    return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
    return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

}  // namespace agln
