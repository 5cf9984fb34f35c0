#pragma once

// Dense float64 tensors (rank 0-2) with define-by-run reverse-mode differentiation.
//
// A Tape records every primitive whose inputs require gradients while a TapeScope is
// active on the calling thread. Outside a scope, primitives only compute values
// (inference mode). Tensors share storage by handle; copying a Tensor is cheap.
//
// Binary elementwise primitives broadcast each axis independently when one side has
// extent 1 (rank-0 acts as 1x1, rank-1 of length n acts as a 1xn row).
//
// Kinks: abs and leaky_relu use the right-hand derivative at 0.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ivae/errors.hpp"

namespace ivae {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tape;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // sized like values iff requires_grad
    bool requires_grad = false;
    std::optional<std::size_t> tape_id;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

inline Tape*& active_tape_slot() {
    thread_local Tape* tape = nullptr;
    return tape;
}

}  // namespace detail

class Tensor {
public:
    Tensor() : impl_(std::make_shared<detail::TensorImpl>()) { impl_->values.assign(1, 0.0); }

    Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
        if (shape.size() > 2) throw ShapeError("tensor: rank > 2 unsupported, got " + shape_str(shape));
        if (shape_numel(shape) != values.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                             " values");
        impl_->shape = std::move(shape);
        impl_->values = std::move(values);
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }
    static Tensor zeros(Shape shape) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }
    static Tensor full(Shape shape, double v) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }
    static Tensor vector(std::vector<double> v) {
        const auto n = v.size();
        return Tensor({n}, std::move(v));
    }
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        std::vector<double> v;
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("tensor: ragged matrix literal");
            v.insert(v.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(v));
    }

    const Shape& shape() const noexcept { return impl_->shape; }
    std::size_t rank() const noexcept { return impl_->shape.size(); }
    std::size_t size() const noexcept { return impl_->values.size(); }
    std::size_t rows() const noexcept { return rank() == 2 ? impl_->shape[0] : 1; }
    std::size_t cols() const noexcept {
        return rank() == 0 ? 1 : impl_->shape.back();
    }

    std::span<const double> values() const noexcept { return impl_->values; }
    // Direct write access, for leaves (parameters, data buffers). Not tracked by the tape.
    std::span<double> mutable_values() noexcept { return impl_->values; }

    double item() const {
        if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
        return impl_->values[0];
    }
    double operator[](std::size_t i) const { return impl_->values[i]; }
    double at(std::size_t r, std::size_t c) const { return impl_->values[r * cols() + c]; }

    bool requires_grad() const noexcept { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        impl_->requires_grad = on;
        if (on) impl_->ensure_grad();
        else impl_->grad.clear();
        return *this;
    }
    std::span<const double> grad() const noexcept { return impl_->grad; }
    std::span<double> mutable_grad() noexcept { return impl_->grad; }
    void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

    std::optional<std::size_t> tape_id() const noexcept { return impl_->tape_id; }
    bool is_leaf() const noexcept { return !impl_->tape_id.has_value(); }

    // Fresh leaf with copied values and no gradient slot.
    Tensor detach() const { return Tensor(impl_->shape, impl_->values); }

    bool same_storage(const Tensor& o) const noexcept { return impl_ == o.impl_; }

    const detail::ImplPtr& impl() const noexcept { return impl_; }

private:
    explicit Tensor(detail::ImplPtr p) : impl_(std::move(p)) {}
    friend Tensor wrap_impl(detail::ImplPtr p);

    detail::ImplPtr impl_;
};

inline Tensor wrap_impl(detail::ImplPtr p) { return Tensor(std::move(p)); }

class Tape {
public:
    struct Node {
        std::string_view kind;
        std::vector<std::optional<std::size_t>> inputs;
        std::size_t output;
        std::function<void()> backward;
    };

    std::size_t record(std::string_view kind, const std::vector<detail::ImplPtr>& inputs, const detail::ImplPtr& out,
                       std::function<void()> backward) {
        if (consumed_) throw std::logic_error("tape: recording onto a tape that already ran backward; reset it first");
        Node node{kind, {}, nodes_.size(), std::move(backward)};
        node.inputs.reserve(inputs.size());
        for (const auto& in : inputs) node.inputs.push_back(in->tape_id);
        out->tape_id = node.output;
        nodes_.push_back(std::move(node));
        return nodes_.back().output;
    }

    // Propagates d(loss)/d(.) to every tensor recorded on this tape and to the leaves they reach.
    void backward(const Tensor& loss) {
        if (loss.rank() != 0)
            throw ShapeError("backward: loss must have shape [], got " + shape_str(loss.shape()));
        if (consumed_) throw std::logic_error("backward: called twice on the same tape without reset");
        if (!loss.requires_grad()) throw std::logic_error("backward: loss does not depend on any tensor requiring grad");
        consumed_ = true;
        auto& impl = *loss.impl();
        impl.ensure_grad();
        impl.grad[0] += 1.0;
        if (!impl.tape_id) return;
        for (std::size_t i = *impl.tape_id + 1; i-- > 0;) nodes_[i].backward();
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    bool consumed() const noexcept { return consumed_; }

private:
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

inline Tape* active_tape() noexcept { return detail::active_tape_slot(); }

// Makes `tape` the recording target for this thread for the lifetime of the scope.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = &tape; }
    ~TapeScope() { detail::active_tape_slot() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

// Suspends recording (inference mode) for the lifetime of the guard.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
    ~NoGradGuard() { detail::active_tape_slot() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* previous_;
};

namespace detail {

inline void check_finite(std::string_view op, const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": produced a non-finite value");
}

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
    for (auto* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

// Finishes a primitive: validates the output and, if recording, registers the backward closure.
// `make_backward` receives the output impl and returns the closure.
template <typename MakeBackward>
Tensor finish(std::string_view op, Shape shape, std::vector<double> values, std::vector<const Tensor*> inputs,
              MakeBackward&& make_backward) {
    check_finite(op, values);
    auto out = std::make_shared<TensorImpl>();
    out->shape = std::move(shape);
    out->values = std::move(values);
    Tape* tape = active_tape_slot();
    bool needs = false;
    for (auto* t : inputs) needs = needs || t->requires_grad();
    if (tape && needs) {
        out->requires_grad = true;
        out->ensure_grad();
        std::vector<ImplPtr> ins;
        ins.reserve(inputs.size());
        for (auto* t : inputs) ins.push_back(t->impl());
        tape->record(op, ins, out, make_backward(out));
    }
    return wrap_impl(std::move(out));
}

struct View2 {
    std::size_t r, c;
};

inline View2 view2(const Tensor& t) { return {t.rows(), t.cols()}; }

inline std::size_t bdim(std::string_view op, std::size_t a, std::size_t b, const Tensor& x, const Tensor& y) {
    if (a == b || b == 1) return a;
    if (a == 1) return b;
    throw ShapeError(std::string(op) + ": shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()) +
                     " do not broadcast");
}

template <typename F, typename DA, typename DB>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
    const auto va = view2(a), vb = view2(b);
    const std::size_t R = bdim(op, va.r, vb.r, a, b);
    const std::size_t C = bdim(op, va.c, vb.c, a, b);
    Shape shape;
    const std::size_t rank = std::max(a.rank(), b.rank());
    if (rank == 2) shape = {R, C};
    else if (rank == 1) shape = {C};
    std::vector<double> out(R * C);
    const auto A = a.values();
    const auto B = b.values();
    const bool same = va.r == vb.r && va.c == vb.c;
    if (same) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[i], B[i]);
    } else {
        for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < C; ++j)
                out[i * C + j] = f(A[(va.r == 1 ? 0 : i) * va.c + (va.c == 1 ? 0 : j)],
                                   B[(vb.r == 1 ? 0 : i) * vb.c + (vb.c == 1 ? 0 : j)]);
    }
    auto ia = a.impl(), ib = b.impl();
    return finish(op, std::move(shape), std::move(out), {&a, &b}, [=](const ImplPtr& o) {
        return [=]() {
            const auto& g = o->grad;
            const auto& Av = ia->values;
            const auto& Bv = ib->values;
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < C; ++j) {
                    const std::size_t k = i * C + j;
                    const std::size_t ka = (va.r == 1 ? 0 : i) * va.c + (va.c == 1 ? 0 : j);
                    const std::size_t kb = (vb.r == 1 ? 0 : i) * vb.c + (vb.c == 1 ? 0 : j);
                    if (ia->requires_grad) ia->grad[ka] += g[k] * da(Av[ka], Bv[kb], o->values[k]);
                    if (ib->requires_grad) ib->grad[kb] += g[k] * db(Av[ka], Bv[kb], o->values[k]);
                }
        };
    });
}

template <typename F, typename D>
Tensor unary(std::string_view op, const Tensor& a, F f, D d) {
    const auto A = a.values();
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = f(A[i]);
    auto ia = a.impl();
    return finish(op, a.shape(), std::move(out), {&a}, [=](const ImplPtr& o) {
        return [=]() {
            if (!ia->requires_grad) return;
            for (std::size_t i = 0; i < o->values.size(); ++i)
                ia->grad[i] += o->grad[i] * d(ia->values[i], o->values[i]);
        };
    });
}

using RowMajorMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstRowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid_value(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

// ---- primitives -------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    for (double v : b.values())
        if (v == 0.0) throw DomainError("div: division by zero");
    return detail::binary(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double o) { return -o / y; });
}

inline Tensor neg(const Tensor& a) {
    return detail::unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}

inline Tensor log(const Tensor& a) {
    for (double v : a.values())
        if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
    return detail::unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor abs(const Tensor& a) {
    return detail::unary(
        "abs", a, [](double x) { return std::abs(x); }, [](double x, double) { return x < 0 ? -1.0 : 1.0; });
}

inline Tensor sqrt(const Tensor& a) {
    for (double v : a.values())
        if (!(v > 0.0)) throw DomainError("sqrt: non-positive input " + std::to_string(v));
    return detail::unary(
        "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double o) { return 0.5 / o; });
}

inline Tensor leaky_relu(const Tensor& a, double slope = 0.01) {
    return detail::unary(
        "leaky_relu", a, [slope](double x) { return x < 0 ? slope * x : x; },
        [slope](double x, double) { return x < 0 ? slope : 1.0; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary(
        "sigmoid", a, [](double x) { return detail::sigmoid_value(x); },
        [](double, double o) { return o * (1.0 - o); });
}

inline Tensor softplus(const Tensor& a) {
    return detail::unary(
        "softplus", a, [](double x) { return detail::softplus_value(x); },
        [](double x, double) { return detail::sigmoid_value(x); });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary(
        "tanh", a, [](double x) { return std::tanh(x); }, [](double, double o) { return 1.0 - o * o; });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are not conformable");
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    std::vector<double> out(n * m);
    using detail::ConstRowMajorMap;
    using detail::RowMajorMap;
    ConstRowMajorMap A(a.values().data(), n, k), B(b.values().data(), k, m);
    RowMajorMap(out.data(), n, m).noalias() = A * B;
    auto ia = a.impl(), ib = b.impl();
    return detail::finish("matmul", {n, m}, std::move(out), {&a, &b}, [=](const detail::ImplPtr& o) {
        return [=]() {
            ConstRowMajorMap G(o->grad.data(), n, m);
            if (ia->requires_grad)
                RowMajorMap(ia->grad.data(), n, k).noalias() += G * ConstRowMajorMap(ib->values.data(), k, m).transpose();
            if (ib->requires_grad)
                RowMajorMap(ib->grad.data(), k, m).noalias() += ConstRowMajorMap(ia->values.data(), n, k).transpose() * G;
        };
    });
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
    const auto A = a.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
    auto ia = a.impl();
    return detail::finish("transpose", {c, r}, std::move(out), {&a}, [=](const detail::ImplPtr& o) {
        return [=]() {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ia->grad[i * c + j] += o->grad[j * r + i];
        };
    });
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto ia = a.impl();
    return detail::finish("sum", {}, {s}, {&a}, [=](const detail::ImplPtr& o) {
        return [=]() {
            for (auto& g : ia->grad) g += o->grad[0];
        };
    });
}

inline Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto ia = a.impl();
    return detail::finish("mean", {}, {s * inv}, {&a}, [=](const detail::ImplPtr& o) {
        return [=]() {
            for (auto& g : ia->grad) g += o->grad[0] * inv;
        };
    });
}

namespace detail {

inline Shape reduced_shape(const Tensor& a, std::size_t axis) {
    if (a.rank() == 1) {
        if (axis != 0) throw ShapeError("reduce: axis out of range for " + shape_str(a.shape()));
        return {};
    }
    if (a.rank() != 2 || axis > 1) throw ShapeError("reduce: axis out of range for " + shape_str(a.shape()));
    return axis == 0 ? Shape{1, a.cols()} : Shape{a.rows(), 1};
}

}  // namespace detail

// Sum along one axis; rank-2 inputs keep the reduced axis with extent 1.
inline Tensor sum(const Tensor& a, std::size_t axis) {
    Shape shape = detail::reduced_shape(a, axis);
    const std::size_t R = a.rows(), C = a.cols();
    const bool along_rows = a.rank() == 1 || axis == 1;
    std::vector<double> out(along_rows ? R : C, 0.0);
    const auto A = a.values();
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) out[along_rows ? i : j] += A[i * C + j];
    auto ia = a.impl();
    return detail::finish("sum", std::move(shape), std::move(out), {&a}, [=](const detail::ImplPtr& o) {
        return [=]() {
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < C; ++j) ia->grad[i * C + j] += o->grad[along_rows ? i : j];
        };
    });
}

inline Tensor mean(const Tensor& a, std::size_t axis) {
    const std::size_t extent = a.rank() == 1 ? a.size() : a.shape()[axis];
    return mul(sum(a, axis), Tensor::scalar(1.0 / static_cast<double>(extent)));
}

// Numerically stable log(sum(exp(a))) along one axis, keeping the axis as in sum(a, axis).
inline Tensor logsumexp(const Tensor& a, std::size_t axis) {
    Shape shape = detail::reduced_shape(a, axis);
    const std::size_t R = a.rows(), C = a.cols();
    const bool along_rows = a.rank() == 1 || axis == 1;
    const std::size_t m = along_rows ? R : C;
    std::vector<double> mx(m, -std::numeric_limits<double>::infinity()), out(m, 0.0);
    const auto A = a.values();
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) {
            auto& slot = mx[along_rows ? i : j];
            slot = std::max(slot, A[i * C + j]);
        }
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) {
            const std::size_t s = along_rows ? i : j;
            out[s] += std::exp(A[i * C + j] - mx[s]);
        }
    for (std::size_t s = 0; s < m; ++s) out[s] = mx[s] + std::log(out[s]);
    auto ia = a.impl();
    return detail::finish("logsumexp", std::move(shape), std::move(out), {&a}, [=](const detail::ImplPtr& o) {
        return [=]() {
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < C; ++j) {
                    const std::size_t s = along_rows ? i : j;
                    ia->grad[i * C + j] += o->grad[s] * std::exp(ia->values[i * C + j] - o->values[s]);
                }
        };
    });
}

// Explicit broadcast of `a` to `shape` (rules as for binary primitives).
inline Tensor broadcast(const Tensor& a, const Shape& shape) {
    return add(a, Tensor::zeros(shape));
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
    for (const auto& p : parts)
        if (p.rank() != 2) throw ShapeError("concat: expected rank-2 inputs, got " + shape_str(p.shape()));
    const std::size_t fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        const std::size_t f = axis == 0 ? p.cols() : p.rows();
        if (f != fixed)
            throw ShapeError("concat: shapes " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()) +
                             " disagree off the concat axis");
        total += axis == 0 ? p.rows() : p.cols();
    }
    const std::size_t R = axis == 0 ? total : fixed;
    const std::size_t C = axis == 0 ? fixed : total;
    std::vector<double> out(R * C);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const auto V = p.values();
        for (std::size_t i = 0; i < p.rows(); ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) {
                const std::size_t oi = axis == 0 ? off + i : i;
                const std::size_t oj = axis == 0 ? j : off + j;
                out[oi * C + oj] = V[i * p.cols() + j];
            }
        off += axis == 0 ? p.rows() : p.cols();
    }
    std::vector<const Tensor*> ins;
    std::vector<detail::ImplPtr> impls;
    for (const auto& p : parts) {
        ins.push_back(&p);
        impls.push_back(p.impl());
    }
    return detail::finish("concat", {R, C}, std::move(out), ins, [=](const detail::ImplPtr& o) {
        return [=]() {
            for (std::size_t k = 0; k < impls.size(); ++k) {
                auto& p = *impls[k];
                if (!p.requires_grad) continue;
                const std::size_t pr = p.shape[0], pc = p.shape[1];
                for (std::size_t i = 0; i < pr; ++i)
                    for (std::size_t j = 0; j < pc; ++j) {
                        const std::size_t oi = axis == 0 ? offsets[k] + i : i;
                        const std::size_t oj = axis == 0 ? j : offsets[k] + j;
                        p.grad[i * pc + j] += o->grad[oi * C + oj];
                    }
            }
        };
    });
}

// Half-open range [begin, end) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    if (a.rank() == 0 || axis >= a.rank() || begin > end || end > a.shape()[axis])
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " invalid for " + shape_str(a.shape()));
    const std::size_t R = a.rows(), C = a.cols();
    const bool rows = a.rank() == 2 && axis == 0;
    const std::size_t oR = rows ? end - begin : R;
    const std::size_t oC = rows ? C : end - begin;
    std::vector<double> out(oR * oC);
    const auto A = a.values();
    for (std::size_t i = 0; i < oR; ++i)
        for (std::size_t j = 0; j < oC; ++j)
            out[i * oC + j] = A[(rows ? begin + i : i) * C + (rows ? j : begin + j)];
    Shape shape = a.rank() == 2 ? Shape{oR, oC} : Shape{oC};
    auto ia = a.impl();
    return detail::finish("slice", std::move(shape), std::move(out), {&a}, [=](const detail::ImplPtr& o) {
        return [=]() {
            for (std::size_t i = 0; i < oR; ++i)
                for (std::size_t j = 0; j < oC; ++j)
                    ia->grad[(rows ? begin + i : i) * C + (rows ? j : begin + j)] += o->grad[i * oC + j];
        };
    });
}

// Selects rows by index (minibatch gathering). Gradient scatters back additively.
inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx) {
    if (a.rank() != 2) throw ShapeError("gather_rows: expected rank 2, got " + shape_str(a.shape()));
    const std::size_t C = a.cols();
    std::vector<double> out(idx.size() * C);
    const auto A = a.values();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
        std::copy_n(A.begin() + static_cast<std::ptrdiff_t>(idx[i] * C), C, out.begin() + static_cast<std::ptrdiff_t>(i * C));
    }
    std::vector<std::size_t> ids(idx.begin(), idx.end());
    auto ia = a.impl();
    return detail::finish("gather_rows", {idx.size(), C}, std::move(out), {&a}, [=](const detail::ImplPtr& o) {
        return [=]() {
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = 0; j < C; ++j) ia->grad[ids[i] * C + j] += o->grad[i * C + j];
        };
    });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator/(const Tensor& a, double s) { return mul(a, Tensor::scalar(1.0 / s)); }

// ---- gradient checking --------------------------------------------------------------------

// Max relative error between reverse-mode gradients of a scalar function of `leaves` and
// central differences, |a - c| / (|a| + |c| + 1e-12). Leaf values are perturbed in place
// and restored. Throws if `fn` is not deterministic.
inline double gradient_check(const std::function<Tensor()>& fn, std::vector<Tensor> leaves, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("gradient_check: step must be positive");
    std::vector<std::vector<double>> analytic;
    {
        for (auto& l : leaves) {
            l.set_requires_grad(true);
            l.zero_grad();
        }
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = fn();
        if (loss.rank() != 0) throw ShapeError("gradient_check: function must be scalar-valued");
        tape.backward(loss);
        for (auto& l : leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());
    }
    NoGradGuard no_grad;
    const double f0 = fn().item();
    const double f1 = fn().item();
    if (f0 != f1) throw std::logic_error("gradient_check: function is not deterministic");
    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto vals = leaves[li].mutable_values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + step;
            const double fp = fn().item();
            vals[i] = orig - step;
            const double fm = fn().item();
            vals[i] = orig;
            const double central = (fp - fm) / (2.0 * step);
            const double a = analytic[li][i];
            worst = std::max(worst, std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12));
        }
    }
    return worst;
}

// Single-argument form: fn maps a tensor to a scalar tensor.
inline double finite_difference_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
                                      double step) {
    Tensor x = point.detach();
    return gradient_check([&] { return fn(x); }, {x}, step);
}

}  // namespace ivae
