#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a node holding shape, values and (optionally)
// a gradient. Operations executed while a RecordingScope is active, and with at
// least one input that participates in differentiation, append a record to the
// active Tape. backward() walks those records once in reverse order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "vlkit/random.hpp"

namespace vlkit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ')';
    return os.str();
}

/// Raised when operand shapes do not conform. Carries the op name and both shapes.
class ShapeError : public std::invalid_argument {
public:
    ShapeError(std::string op, std::string expected, const Shape& actual)
        : std::invalid_argument(op + ": expected " + expected + ", got " + shape_str(actual)),
          op_(std::move(op)), expected_(std::move(expected)), actual_(actual) {}

    const std::string& op() const noexcept { return op_; }
    const std::string& expected() const noexcept { return expected_; }
    const Shape& actual() const noexcept { return actual_; }

private:
    std::string op_;
    std::string expected_;
    Shape actual_;
};

class TapeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::atomic<bool>& debug_checks() {
    static std::atomic<bool> flag{false};
    return flag;
}

inline std::uint64_t next_tape_serial() {
    static std::atomic<std::uint64_t> serial{0};
    return ++serial;
}

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    // Set when the node is the output of a recorded op.
    std::uint64_t tape_serial = 0;
    std::size_t tape_index = 0;
    bool touched = false;
};

} // namespace detail

/// Scans every op output for NaN/Inf when enabled. Off by default.
inline void set_debug_checks(bool enabled) { detail::debug_checks().store(enabled); }
inline bool debug_checks_enabled() { return detail::debug_checks().load(); }

template <typename T>
class Tape;

template <typename T>
class Tensor {
public:
    using value_type = T;
    using Node = detail::TensorNode<T>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : node_(std::make_shared<Node>()) {
        for (auto extent : shape) {
            if (extent == 0) throw ShapeError("tensor", "positive extents", shape);
        }
        node_->data.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node>()) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor", std::to_string(values.size()) + " elements", shape);
        }
        node_->shape = std::move(shape);
        node_->data = std::move(values);
    }

    static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    /// Extent of axis `axis`; negative values count from the end.
    std::size_t dim(int axis) const {
        const int r = static_cast<int>(rank());
        const int a = axis < 0 ? axis + r : axis;
        if (a < 0 || a >= r) throw std::out_of_range("axis " + std::to_string(axis) + " out of range");
        return node_->shape[static_cast<std::size_t>(a)];
    }

    std::span<const T> data() const { return node_->data; }
    std::span<T> mutable_data() { return node_->data; }
    T item() const {
        if (numel() != 1) throw ShapeError("item", "one element", shape());
        return node_->data[0];
    }
    T operator[](std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool value) {
        node_->requires_grad = value;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    /// Index of the producing record on the tape that is currently active, if any.
    std::optional<std::size_t> node_id() const;

    Tensor clone() const {
        Tensor out(shape(), std::vector<T>(node_->data));
        return out;
    }

    bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

    const std::shared_ptr<Node>& node_ptr() const noexcept { return node_; }

private:
    std::shared_ptr<Node> node_;
};

template <typename T>
class Tape {
public:
    using Node = detail::TensorNode<T>;
    using NodePtr = std::shared_ptr<Node>;

    struct Record {
        std::string_view kind;
        std::vector<NodePtr> inputs;
        std::vector<bool> needs_grad;
        NodePtr output;
        std::function<void(Record&)> backward;
    };

    Tape() : serial_(detail::next_tape_serial()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t serial() const noexcept { return serial_; }
    std::size_t size() const noexcept { return records_.size(); }
    const Record& record(std::size_t i) const { return records_.at(i); }

    /// Drops every record; outstanding tensors lose their node ids.
    void clear() {
        records_.clear();
        serial_ = detail::next_tape_serial();
    }

    static Tape* active() noexcept { return active_; }

    bool owns(const Node& node) const noexcept {
        return node.tape_serial == serial_ && node.tape_index < records_.size() &&
               records_[node.tape_index].output.get() == &node;
    }

    /// True if gradients must flow into `node` (a leaf requiring grad, or a
    /// recorded intermediate on this tape).
    bool tracks(const Node& node) const noexcept { return node.requires_grad || owns(node); }

    void push(std::string_view kind, std::vector<NodePtr> inputs, const NodePtr& output,
              std::function<void(Record&)> backward) {
        Record rec;
        rec.kind = kind;
        rec.needs_grad.reserve(inputs.size());
        for (const auto& in : inputs) rec.needs_grad.push_back(tracks(*in));
        rec.inputs = std::move(inputs);
        rec.output = output;
        rec.backward = std::move(backward);
        output->tape_serial = serial_;
        output->tape_index = records_.size();
        records_.push_back(std::move(rec));
    }

    void run_backward(Node& root) {
        if (root.data.size() != 1) {
            throw TapeError("backward: root must hold one element, got shape " + shape_str(root.shape));
        }
        if (!owns(root)) throw TapeError("backward: root is not recorded on the active tape");
        for (auto& rec : records_) {
            rec.output->grad.assign(rec.output->data.size(), T{0});
            rec.output->touched = false;
        }
        root.grad[0] = T{1};
        root.touched = true;
        for (std::size_t i = root.tape_index + 1; i-- > 0;) {
            auto& rec = records_[i];
            if (!rec.output->touched) continue;
            rec.backward(rec);
        }
    }

private:
    template <typename>
    friend class RecordingScope;
    template <typename>
    friend class NoRecordScope;

    static inline thread_local Tape* active_ = nullptr;

    std::vector<Record> records_;
    std::uint64_t serial_;
};

/// Activates a tape for the current thread for the lifetime of the scope.
template <typename T>
class RecordingScope {
public:
    explicit RecordingScope(Tape<T>& tape) : previous_(Tape<T>::active_) { Tape<T>::active_ = &tape; }
    ~RecordingScope() { Tape<T>::active_ = previous_; }
    RecordingScope(const RecordingScope&) = delete;
    RecordingScope& operator=(const RecordingScope&) = delete;

private:
    Tape<T>* previous_;
};

/// Suspends recording for the current thread (evaluation passes).
template <typename T>
class NoRecordScope {
public:
    NoRecordScope() : previous_(Tape<T>::active_) { Tape<T>::active_ = nullptr; }
    ~NoRecordScope() { Tape<T>::active_ = previous_; }
    NoRecordScope(const NoRecordScope&) = delete;
    NoRecordScope& operator=(const NoRecordScope&) = delete;

private:
    Tape<T>* previous_;
};

template <typename T>
std::optional<std::size_t> Tensor<T>::node_id() const {
    const auto* tape = Tape<T>::active();
    if (!node_ || !tape || !tape->owns(*node_)) return std::nullopt;
    return node_->tape_index;
}

/// Populates grads of every tracked tensor reachable from `root`.
template <typename T>
void backward(const Tensor<T>& root) {
    auto* tape = Tape<T>::active();
    if (!tape) throw TapeError("backward: no active tape");
    tape->run_backward(*root.node_ptr());
}

namespace detail {

template <typename T>
using Record = typename Tape<T>::Record;

/// Gradient buffer of input `i`, or an empty span if it needs none.
template <typename T>
std::span<T> input_grad(Record<T>& rec, std::size_t i) {
    if (!rec.needs_grad[i]) return {};
    auto& node = *rec.inputs[i];
    if (node.grad.size() != node.data.size()) node.grad.assign(node.data.size(), T{0});
    node.touched = true;
    return node.grad;
}

template <typename T>
bool any_tracked(std::initializer_list<const Tensor<T>*> inputs) {
    const auto* tape = Tape<T>::active();
    if (!tape) return false;
    for (const auto* in : inputs) {
        if (tape->tracks(*in->node_ptr())) return true;
    }
    return false;
}

template <typename T>
void check_finite(const Tensor<T>& out, std::string_view op) {
    if (!debug_checks_enabled()) return;
    for (T v : out.data()) {
        if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": produced a non-finite value");
    }
}

template <typename T, typename F>
void record(std::string_view kind, std::initializer_list<const Tensor<T>*> inputs, const Tensor<T>& out,
            F&& backward_fn) {
    check_finite(out, kind);
    if (!any_tracked<T>(inputs)) return;
    std::vector<typename Tape<T>::NodePtr> nodes;
    nodes.reserve(inputs.size());
    for (const auto* in : inputs) nodes.push_back(in->node_ptr());
    Tape<T>::active()->push(kind, std::move(nodes), out.node_ptr(), std::forward<F>(backward_fn));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

inline bool is_suffix(const Shape& whole, const Shape& tail) {
    if (tail.size() > whole.size()) return false;
    return std::equal(tail.begin(), tail.end(), whole.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

inline std::size_t normalize_axis(int axis, std::size_t rank, std::string_view op) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw std::out_of_range(std::string(op) + ": axis out of range");
    return static_cast<std::size_t>(a);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a (..., M, K) times b (K, N) -> (..., M, N). b is shared across leading axes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() != 2 || a.dim(-1) != b.dim(0)) {
        throw ShapeError("matmul", "lhs (..., M, K) matching rhs " + shape_str(b.shape()) + " of shape (K, N)",
                         a.shape());
    }
    const auto K = b.dim(0), N = b.dim(1);
    const auto rows = a.numel() / K;
    Shape out_shape = a.shape();
    out_shape.back() = N;
    Tensor<T> out(out_shape);
    using namespace detail;
    MutMap<T>(out.mutable_data().data(), rows, N).noalias() =
        ConstMap<T>(a.data().data(), rows, K) * ConstMap<T>(b.data().data(), K, N);
    record<T>("matmul", {&a, &b}, out, [rows, K, N](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        ConstMap<T> dy(gy.data(), rows, N);
        if (auto ga = input_grad<T>(rec, 0); !ga.empty()) {
            MutMap<T>(ga.data(), rows, K).noalias() +=
                dy * ConstMap<T>(rec.inputs[1]->data.data(), K, N).transpose();
        }
        if (auto gb = input_grad<T>(rec, 1); !gb.empty()) {
            MutMap<T>(gb.data(), K, N).noalias() +=
                ConstMap<T>(rec.inputs[0]->data.data(), rows, K).transpose() * dy;
        }
    });
    return out;
}

/// Batched product: a (..., M, K) times b (..., K, N) with identical leading axes.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    const bool ok = a.rank() >= 3 && a.rank() == b.rank() && a.dim(-1) == b.dim(-2) &&
                    std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin());
    if (!ok) throw ShapeError("bmm", "batch-compatible with rhs " + shape_str(b.shape()), a.shape());
    const auto M = a.dim(-2), K = a.dim(-1), N = b.dim(-1);
    const auto batches = a.numel() / (M * K);
    Shape out_shape = a.shape();
    out_shape.back() = N;
    Tensor<T> out(out_shape);
    using namespace detail;
    for (std::size_t i = 0; i < batches; ++i) {
        MutMap<T>(out.mutable_data().data() + i * M * N, M, N).noalias() =
            ConstMap<T>(a.data().data() + i * M * K, M, K) * ConstMap<T>(b.data().data() + i * K * N, K, N);
    }
    record<T>("bmm", {&a, &b}, out, [batches, M, K, N](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        auto ga = input_grad<T>(rec, 0);
        auto gb = input_grad<T>(rec, 1);
        const T* ad = rec.inputs[0]->data.data();
        const T* bd = rec.inputs[1]->data.data();
        for (std::size_t i = 0; i < batches; ++i) {
            ConstMap<T> dy(gy.data() + i * M * N, M, N);
            if (!ga.empty()) {
                MutMap<T>(ga.data() + i * M * K, M, K).noalias() +=
                    dy * ConstMap<T>(bd + i * K * N, K, N).transpose();
            }
            if (!gb.empty()) {
                MutMap<T>(gb.data() + i * K * N, K, N).noalias() +=
                    ConstMap<T>(ad + i * M * K, M, K).transpose() * dy;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

// Resolves leading-axis broadcasting: returns (big, small) order and whether swapped.
template <typename T>
std::pair<const Tensor<T>*, const Tensor<T>*> broadcast_pair(const Tensor<T>& a, const Tensor<T>& b,
                                                             std::string_view op) {
    if (is_suffix(a.shape(), b.shape())) return {&a, &b};
    if (is_suffix(b.shape(), a.shape())) return {&b, &a};
    throw ShapeError(std::string(op), "a shape whose trailing axes equal " + shape_str(b.shape()), a.shape());
}

} // namespace detail

/// Elementwise sum; the smaller operand is broadcast over leading axes.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail;
    auto [big, small] = broadcast_pair(a, b, "add");
    const auto n = big->numel(), m = small->numel();
    Tensor<T> out(big->shape());
    auto y = out.mutable_data();
    const auto x = big->data();
    const auto s = small->data();
    for (std::size_t i = 0; i < n; i += m) {
        for (std::size_t j = 0; j < m; ++j) y[i + j] = x[i + j] + s[j];
    }
    record<T>("add", {big, small}, out, [n, m](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        if (auto g = input_grad<T>(rec, 0); !g.empty()) {
            for (std::size_t i = 0; i < n; ++i) g[i] += gy[i];
        }
        if (auto g = input_grad<T>(rec, 1); !g.empty()) {
            for (std::size_t i = 0; i < n; i += m) {
                for (std::size_t j = 0; j < m; ++j) g[j] += gy[i + j];
            }
        }
    });
    return out;
}

/// Elementwise product with the same broadcasting rule as add.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail;
    auto [big, small] = broadcast_pair(a, b, "mul");
    const auto n = big->numel(), m = small->numel();
    Tensor<T> out(big->shape());
    auto y = out.mutable_data();
    const auto x = big->data();
    const auto s = small->data();
    for (std::size_t i = 0; i < n; i += m) {
        for (std::size_t j = 0; j < m; ++j) y[i + j] = x[i + j] * s[j];
    }
    record<T>("mul", {big, small}, out, [n, m](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        const auto& xd = rec.inputs[0]->data;
        const auto& sd = rec.inputs[1]->data;
        if (auto g = input_grad<T>(rec, 0); !g.empty()) {
            for (std::size_t i = 0; i < n; i += m) {
                for (std::size_t j = 0; j < m; ++j) g[i + j] += gy[i + j] * sd[j];
            }
        }
        if (auto g = input_grad<T>(rec, 1); !g.empty()) {
            for (std::size_t i = 0; i < n; i += m) {
                for (std::size_t j = 0; j < m; ++j) g[j] += gy[i + j] * xd[i + j];
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    using namespace detail;
    Tensor<T> out(a.shape());
    auto y = out.mutable_data();
    const auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * factor;
    record<T>("scale", {&a}, out, [factor](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        auto g = input_grad<T>(rec, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * factor;
    });
    return out;
}

namespace detail {

template <typename T>
T gelu_value(T x) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k = T(0.044715);
    return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
    constexpr T c = T(0.7978845608028654);
    constexpr T k = T(0.044715);
    const T t = std::tanh(c * (x + k * x * x * x));
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
}

} // namespace detail

/// Tanh-approximation GELU (coefficient 0.044715).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    using namespace detail;
    Tensor<T> out(a.shape());
    auto y = out.mutable_data();
    const auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_value(x[i]);
    record<T>("gelu", {&a}, out, [](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        const auto& xd = rec.inputs[0]->data;
        auto g = input_grad<T>(rec, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * gelu_derivative(xd[i]);
    });
    return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
    using namespace detail;
    Tensor<T> out(a.shape());
    auto y = out.mutable_data();
    const auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
    record<T>("tanh", {&a}, out, [](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        const auto& yd = rec.output->data;
        auto g = input_grad<T>(rec, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * (T(1) - yd[i] * yd[i]);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    using namespace detail;
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape", "a shape with " + std::to_string(a.numel()) + " elements", shape);
    }
    Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
    record<T>("reshape", {&a}, out, [](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        auto g = input_grad<T>(rec, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    });
    return out;
}

/// Swaps two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int axis_a, int axis_b) {
    using namespace detail;
    auto i = normalize_axis(axis_a, a.rank(), "transpose");
    auto j = normalize_axis(axis_b, a.rank(), "transpose");
    if (i > j) std::swap(i, j);
    const auto& s = a.shape();
    Shape out_shape = s;
    std::swap(out_shape[i], out_shape[j]);
    Tensor<T> out(out_shape);
    if (i == j) {
        std::copy(a.data().begin(), a.data().end(), out.mutable_data().begin());
    }
    const auto prod = [&](std::size_t from, std::size_t to) {
        std::size_t p = 1;
        for (std::size_t k = from; k < to; ++k) p *= s[k];
        return p;
    };
    const std::size_t outer = prod(0, i), si = s[i], mid = prod(i + 1, j), sj = s[j], inner = prod(j + 1, s.size());
    // Maps source block (o, x, m, y) to destination block (o, y, m, x); each block holds `inner` elements.
    auto permute = [=](const T* src, T* dst, bool forward) {
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t x = 0; x < si; ++x)
                for (std::size_t m = 0; m < mid; ++m)
                    for (std::size_t y = 0; y < sj; ++y) {
                        const std::size_t from = (((o * si + x) * mid + m) * sj + y) * inner;
                        const std::size_t to = (((o * sj + y) * mid + m) * si + x) * inner;
                        if (forward) {
                            std::copy_n(src + from, inner, dst + to);
                        } else {
                            for (std::size_t k = 0; k < inner; ++k) dst[from + k] += src[to + k];
                        }
                    }
    };
    if (i != j) permute(a.data().data(), out.mutable_data().data(), true);
    record<T>("transpose", {&a}, out, [permute, same = i == j](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        auto g = input_grad<T>(rec, 0);
        if (same) {
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += gy[k];
        } else {
            permute(gy.data(), g.data(), false);
        }
    });
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    using namespace detail;
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const auto ax = normalize_axis(axis, parts[0].rank(), "concat");
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        Shape expect = parts[0].shape();
        expect[ax] = p.rank() == expect.size() ? p.shape()[ax] : 0;
        if (p.shape() != expect) throw ShapeError("concat", "shape matching " + shape_str(parts[0].shape()) + " off the concat axis", p.shape());
        out_shape[ax] += p.shape()[ax];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t k = 0; k < ax; ++k) outer *= out_shape[k];
    for (std::size_t k = ax + 1; k < out_shape.size(); ++k) inner *= out_shape[k];
    Tensor<T> out(out_shape);
    const std::size_t out_row = out_shape[ax] * inner;
    std::vector<std::size_t> widths;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape()[ax] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(p.data().data() + o * w, w, out.mutable_data().data() + o * out_row + offset);
        }
        widths.push_back(w);
        offset += w;
    }
    check_finite(out, "concat");
    auto* tape = Tape<T>::active();
    bool tracked = false;
    for (const auto& p : parts) tracked = tracked || (tape && tape->tracks(*p.node_ptr()));
    if (!tracked) return out;
    std::vector<typename Tape<T>::NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node_ptr());
    tape->push("concat", std::move(nodes), out.node_ptr(), [widths, outer, out_row](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (auto g = input_grad<T>(rec, k); !g.empty()) {
                for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t e = 0; e < widths[k]; ++e) g[o * widths[k] + e] += gy[o * out_row + off + e];
                }
            }
            off += widths[k];
        }
    });
    return out;
}

/// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t begin, std::size_t end) {
    using namespace detail;
    const auto ax = normalize_axis(axis, a.rank(), "slice");
    if (begin >= end || end > a.shape()[ax]) {
        throw ShapeError("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                      ") inside axis " + std::to_string(ax),
                         a.shape());
    }
    Shape out_shape = a.shape();
    out_shape[ax] = end - begin;
    std::size_t outer = 1, inner = 1;
    for (std::size_t k = 0; k < ax; ++k) outer *= out_shape[k];
    for (std::size_t k = ax + 1; k < out_shape.size(); ++k) inner *= out_shape[k];
    const std::size_t in_row = a.shape()[ax] * inner, out_row = (end - begin) * inner, off = begin * inner;
    Tensor<T> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(a.data().data() + o * in_row + off, out_row, out.mutable_data().data() + o * out_row);
    }
    record<T>("slice", {&a}, out, [outer, in_row, out_row, off](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        auto g = input_grad<T>(rec, 0);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t e = 0; e < out_row; ++e) g[o * in_row + off + e] += gy[o * out_row + e];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and reductions

namespace detail {

template <typename T>
void softmax_backward(Record<T>& rec, std::size_t width) {
    const auto& gy = rec.output->grad;
    const auto& y = rec.output->data;
    auto g = input_grad<T>(rec, 0);
    if (g.empty()) return;
    for (std::size_t r = 0; r < y.size(); r += width) {
        T dot = 0;
        for (std::size_t k = 0; k < width; ++k) dot += gy[r + k] * y[r + k];
        for (std::size_t k = 0; k < width; ++k) g[r + k] += y[r + k] * (gy[r + k] - dot);
    }
}

} // namespace detail

/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
    using namespace detail;
    const std::size_t width = a.dim(-1);
    Tensor<T> out(a.shape());
    const auto x = a.data();
    auto y = out.mutable_data();
    for (std::size_t r = 0; r < x.size(); r += width) {
        T m = x[r];
        for (std::size_t k = 1; k < width; ++k) m = std::max(m, x[r + k]);
        T total = 0;
        for (std::size_t k = 0; k < width; ++k) total += (y[r + k] = std::exp(x[r + k] - m));
        for (std::size_t k = 0; k < width; ++k) y[r + k] /= total;
    }
    record<T>("softmax", {&a}, out, [width](Record<T>& rec) { softmax_backward<T>(rec, width); });
    return out;
}

/// Softmax over the last axis where key positions with mask 0 receive exactly
/// zero weight. `key_mask` has one row of length dim(-1) per leading index of
/// axis 0; the rows are shared across all middle axes.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& a, std::span<const std::uint8_t> key_mask) {
    using namespace detail;
    const std::size_t width = a.dim(-1);
    const std::size_t batch = a.dim(0);
    if (key_mask.size() != batch * width) {
        throw ShapeError("masked_softmax", "mask of " + std::to_string(key_mask.size()) + " = batch x keys elements", a.shape());
    }
    const std::size_t rows_per_batch = a.numel() / (batch * width);
    Tensor<T> out(a.shape());
    const auto x = a.data();
    auto y = out.mutable_data();
    for (std::size_t r = 0; r < x.size() / width; ++r) {
        const auto mask = key_mask.subspan((r / rows_per_batch) * width, width);
        const std::size_t base = r * width;
        bool any = false;
        T m = 0;
        for (std::size_t k = 0; k < width; ++k) {
            if (!mask[k]) continue;
            m = any ? std::max(m, x[base + k]) : x[base + k];
            any = true;
        }
        if (!any) throw std::invalid_argument("attention: a query has zero unmasked keys (degenerate softmax)");
        T total = 0;
        for (std::size_t k = 0; k < width; ++k) {
            y[base + k] = mask[k] ? std::exp(x[base + k] - m) : T{0};
            total += y[base + k];
        }
        for (std::size_t k = 0; k < width; ++k) y[base + k] /= total;
    }
    record<T>("masked_softmax", {&a}, out, [width](Record<T>& rec) { softmax_backward<T>(rec, width); });
    return out;
}

/// Layer normalization over the last axis with affine gamma/beta of that width.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    using namespace detail;
    const std::size_t width = x.dim(-1);
    if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) {
        throw ShapeError("layer_norm", "gamma/beta of shape (" + std::to_string(width) + ")", gamma.shape());
    }
    const std::size_t rows = x.numel() / width;
    Tensor<T> out(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto rstd = std::make_shared<std::vector<T>>(rows);
    const auto xd = x.data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    auto y = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xd.data() + r * width;
        T mean = 0;
        for (std::size_t k = 0; k < width; ++k) mean += row[k];
        mean /= T(width);
        T var = 0;
        for (std::size_t k = 0; k < width; ++k) var += (row[k] - mean) * (row[k] - mean);
        var /= T(width);
        const T inv = T(1) / std::sqrt(var + eps);
        (*rstd)[r] = inv;
        for (std::size_t k = 0; k < width; ++k) {
            const T h = (row[k] - mean) * inv;
            (*xhat)[r * width + k] = h;
            y[r * width + k] = h * gd[k] + bd[k];
        }
    }
    record<T>("layer_norm", {&x, &gamma, &beta}, out, [xhat, rstd, rows, width](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        const auto& gd = rec.inputs[1]->data;
        auto gx = input_grad<T>(rec, 0);
        auto gg = input_grad<T>(rec, 1);
        auto gb = input_grad<T>(rec, 2);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * width;
            if (!gg.empty() || !gb.empty()) {
                for (std::size_t k = 0; k < width; ++k) {
                    if (!gg.empty()) gg[k] += gy[base + k] * (*xhat)[base + k];
                    if (!gb.empty()) gb[k] += gy[base + k];
                }
            }
            if (gx.empty()) continue;
            T mean_d = 0, mean_dx = 0;
            for (std::size_t k = 0; k < width; ++k) {
                const T d = gy[base + k] * gd[k];
                mean_d += d;
                mean_dx += d * (*xhat)[base + k];
            }
            mean_d /= T(width);
            mean_dx /= T(width);
            for (std::size_t k = 0; k < width; ++k) {
                const T d = gy[base + k] * gd[k];
                gx[base + k] += (*rstd)[r] * (d - mean_d - (*xhat)[base + k] * mean_dx);
            }
        }
    });
    return out;
}

/// Gathers rows of `table` (V, E) for each id; the result has shape ids_shape + (E).
template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape ids_shape) {
    using namespace detail;
    if (table.rank() != 2) throw ShapeError("embedding_gather", "a (V, E) table", table.shape());
    if (shape_numel(ids_shape) != ids.size()) throw ShapeError("embedding_gather", std::to_string(ids.size()) + " ids", ids_shape);
    const std::size_t vocab = table.dim(0), width = table.dim(1);
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw std::out_of_range("embedding_gather: id " + std::to_string(id) + " outside table of " +
                                    std::to_string(vocab) + " rows");
        }
    }
    Shape out_shape = std::move(ids_shape);
    out_shape.push_back(width);
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * width, width,
                    out.mutable_data().data() + i * width);
    }
    auto saved = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
    record<T>("embedding_gather", {&table}, out, [saved, width](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        auto g = input_grad<T>(rec, 0);
        for (std::size_t i = 0; i < saved->size(); ++i) {
            T* row = g.data() + static_cast<std::size_t>((*saved)[i]) * width;
            for (std::size_t k = 0; k < width; ++k) row[k] += gy[i * width + k];
        }
    });
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    using namespace detail;
    T total = 0;
    for (T v : a.data()) total += v;
    auto out = Tensor<T>::scalar(total);
    record<T>("sum", {&a}, out, [](Record<T>& rec) {
        const T gy = rec.output->grad[0];
        auto g = input_grad<T>(rec, 0);
        for (auto& v : g) v += gy;
    });
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    using namespace detail;
    T total = 0;
    for (T v : a.data()) total += v;
    const T n = T(a.numel());
    auto out = Tensor<T>::scalar(total / n);
    record<T>("mean", {&a}, out, [n](Record<T>& rec) {
        const T gy = rec.output->grad[0] / n;
        auto g = input_grad<T>(rec, 0);
        for (auto& v : g) v += gy;
    });
    return out;
}

/// Inverted dropout. Identity when not training or rate is zero. The keep mask
/// for element i is a pure function of (key, i).
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double rate, bool train, std::uint64_t key) {
    using namespace detail;
    if (!train || rate <= 0.0) return a;
    if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be below 1");
    const T keep_scale = T(1.0 / (1.0 - rate));
    Tensor<T> out(a.shape());
    auto factors = std::make_shared<std::vector<T>>(a.numel());
    const auto x = a.data();
    auto y = out.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        (*factors)[i] = keyed_uniform(key, i) >= rate ? keep_scale : T{0};
        y[i] = x[i] * (*factors)[i];
    }
    record<T>("dropout", {&a}, out, [factors](Record<T>& rec) {
        const auto& gy = rec.output->grad;
        auto g = input_grad<T>(rec, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * (*factors)[i];
    });
    return out;
}

inline constexpr std::int32_t kIgnoreLabel = -100;

/// Mean softmax cross-entropy of logits (N, C) against labels; labels equal to
/// kIgnoreLabel are skipped. With no counted rows the loss is 0.
template <typename T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
    using namespace detail;
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("cross_entropy_from_logits", "(" + std::to_string(labels.size()) + ", C) logits", logits.shape());
    }
    const std::size_t rows = logits.dim(0), classes = logits.dim(1);
    auto probs = std::make_shared<std::vector<T>>(logits.numel());
    auto saved = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
    const auto x = logits.data();
    T total = 0;
    std::size_t counted = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const auto label = labels[r];
        if (label == kIgnoreLabel) continue;
        if (label < 0 || static_cast<std::size_t>(label) >= classes) {
            throw std::out_of_range("cross_entropy_from_logits: label " + std::to_string(label) + " outside " +
                                    std::to_string(classes) + " classes");
        }
        const T* row = x.data() + r * classes;
        T m = row[0];
        for (std::size_t k = 1; k < classes; ++k) m = std::max(m, row[k]);
        T z = 0;
        for (std::size_t k = 0; k < classes; ++k) z += std::exp(row[k] - m);
        const T lse = m + std::log(z);
        for (std::size_t k = 0; k < classes; ++k) (*probs)[r * classes + k] = std::exp(row[k] - lse);
        total += lse - row[static_cast<std::size_t>(label)];
        ++counted;
    }
    auto out = Tensor<T>::scalar(counted ? total / T(counted) : T{0});
    record<T>("cross_entropy", {&logits}, out, [probs, saved, classes, counted](Record<T>& rec) {
        if (counted == 0) return;
        const T gy = rec.output->grad[0] / T(counted);
        auto g = input_grad<T>(rec, 0);
        for (std::size_t r = 0; r < saved->size(); ++r) {
            const auto label = (*saved)[r];
            if (label == kIgnoreLabel) continue;
            for (std::size_t k = 0; k < classes; ++k) {
                const T target = static_cast<std::size_t>(label) == k ? T{1} : T{0};
                g[r * classes + k] += gy * ((*probs)[r * classes + k] - target);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

/// Max over `coords` of |analytic - central| / max(|analytic|, |central|, 1e-8)
/// for the gradient of `loss()` with respect to `param`, which is perturbed in
/// place. `loss` must be deterministic (dropout disabled).
template <typename T>
double gradient_check(const std::function<Tensor<T>()>& loss, Tensor<T> param,
                      std::span<const std::size_t> coords, double h) {
    const bool had_flag = param.requires_grad();
    param.set_requires_grad(true);
    param.zero_grad();
    {
        Tape<T> tape;
        RecordingScope<T> scope(tape);
        auto value = loss();
        backward(value);
    }
    std::vector<T> analytic(coords.size(), T{0});
    if (param.has_grad()) {
        for (std::size_t i = 0; i < coords.size(); ++i) analytic[i] = param.grad()[coords[i]];
    }
    param.zero_grad();
    param.set_requires_grad(had_flag);

    double worst = 0.0;
    auto values = param.mutable_data();
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const T original = values[coords[i]];
        values[coords[i]] = original + T(h);
        const double plus = static_cast<double>(loss().item());
        values[coords[i]] = original - T(h);
        const double minus = static_cast<double>(loss().item());
        values[coords[i]] = original;
        const double central = (plus - minus) / (2.0 * h);
        const double a = static_cast<double>(analytic[i]);
        const double denom = std::max({std::abs(a), std::abs(central), 1e-8});
        worst = std::max(worst, std::abs(a - central) / denom);
    }
    return worst;
}

/// Same check for a scalar function of a free tensor argument.
template <typename T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                         std::span<const std::size_t> coords, double h) {
    Tensor<T> leaf = x.clone();
    return gradient_check<T>([&] { return f(leaf); }, leaf, coords, h);
}

} // namespace vlkit
