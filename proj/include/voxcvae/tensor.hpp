#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "voxcvae/rng.hpp"

namespace voxcvae {

using Shape = std::vector<int>;

inline std::size_t numel_of(const Shape& s) {
    std::size_t n = 1;
    for (int e : s) n *= std::size_t(e);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

// Shared between handles of one logical tensor so the tape can bind a node
// id through a const reference when the tensor first participates in a
// recorded computation.
struct TapeBinding {
    bool requires_grad = false;
    std::uint64_t tape = 0;  // id of the tape the node below belongs to
    int node = -1;
};

}  // namespace detail

template <class T>
class TapeT;

// Dense n-d array of T in row-major order. Copies share storage; ops never
// mutate their inputs, so shared storage behaves like a value.
template <class T>
struct TensorT {
    Shape shape;
    std::shared_ptr<std::vector<T>> data;
    std::shared_ptr<detail::TapeBinding> bind;

    TensorT() : TensorT(Shape{0}) {}

    explicit TensorT(Shape s)
        : shape(std::move(s)), data(std::make_shared<std::vector<T>>(numel_of(shape), T(0))) {
        validate_shape();
    }

    TensorT(Shape s, std::vector<T> values)
        : shape(std::move(s)), data(std::make_shared<std::vector<T>>(std::move(values))) {
        validate_shape();
        if (data->size() != numel_of(shape))
            throw std::invalid_argument("tensor: " + std::to_string(data->size()) +
                                        " values do not fill shape " + shape_str(shape));
    }

    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    static TensorT full(Shape s, T v) {
        TensorT t(std::move(s));
        std::fill(t.data->begin(), t.data->end(), v);
        return t;
    }

    int rank() const { return int(shape.size()); }
    int extent(int axis) const { return shape[std::size_t(axis)]; }
    std::size_t numel() const { return data->size(); }

    T* ptr() { return data->data(); }
    const T* ptr() const { return data->data(); }
    T& operator[](std::size_t i) { return (*data)[i]; }
    const T& operator[](std::size_t i) const { return (*data)[i]; }

    T item() const {
        if (numel() != 1)
            throw std::invalid_argument("item: tensor " + shape_str(shape) + " is not scalar");
        return (*data)[0];
    }

    bool requires_grad() const { return bind && bind->requires_grad; }

    TensorT& set_requires_grad(bool on) {
        if (!bind) bind = std::make_shared<detail::TapeBinding>();
        bind->requires_grad = on;
        return *this;
    }

    // Deep copy of the payload; drops any tape association.
    TensorT clone() const { return TensorT(shape, *data); }

    // Same storage under a new shape; off-tape (see reshape() for the
    // differentiable version).
    TensorT viewed(Shape s) const {
        if (numel_of(s) != numel())
            throw std::invalid_argument("view: cannot view " + shape_str(shape) + " as " +
                                        shape_str(s));
        TensorT out;
        out.shape = std::move(s);
        out.data = data;
        return out;
    }

    bool all_finite() const {
        for (const T& v : *data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

private:
    void validate_shape() const {
        for (int e : shape)
            if (e < 0) throw std::invalid_argument("tensor: negative extent in " + shape_str(shape));
    }
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

template <class U, class T>
TensorT<U> astype(const TensorT<T>& t) {
    TensorT<U> out(t.shape);
    for (std::size_t i = 0; i < t.numel(); ++i) out[i] = U(t[i]);
    return out;
}

inline DTensor to_double(const Tensor& t) { return astype<double>(t); }
inline Tensor to_float(const DTensor& t) { return astype<float>(t); }

// Reverse-mode tape. Nodes are appended in execution order, which is a
// topological order by construction; backward() walks it once in reverse.
// The tape is confined to one thread (TapeScope installs it thread-locally).
template <class T>
class TapeT {
public:
    using BackwardFn = std::function<void(TapeT&, const T*)>;

    TapeT() : id_(fresh_id()) {}
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    static TapeT* current() { return current_; }

    std::uint64_t id() const { return id_; }
    std::size_t size() const { return nodes_.size(); }

    // Registers a gradient-requiring leaf (parameter or input under study).
    int watch(const TensorT<T>& t) {
        if (!t.requires_grad())
            throw std::invalid_argument("watch: tensor does not require gradients");
        return node_of(t);
    }

    // Resolves the tape node feeding from `t`; requires_grad leaves are
    // registered on first use, plain constants stay off the tape (-1).
    int node_of(const TensorT<T>& t) {
        if (t.bind && t.bind->tape == id_ && t.bind->node >= 0) return t.bind->node;
        if (t.bind && t.bind->requires_grad) {
            t.bind->tape = id_;
            t.bind->node = int(nodes_.size());
            nodes_.push_back(Node{nullptr, t.numel()});
            return t.bind->node;
        }
        return -1;
    }

    // Appends an interior node producing `out`.
    void emit(TensorT<T>& out, BackwardFn fn) {
        out.bind = std::make_shared<detail::TapeBinding>();
        out.bind->tape = id_;
        out.bind->node = int(nodes_.size());
        nodes_.push_back(Node{std::move(fn), out.numel()});
    }

    // Reverse sweep from a scalar loss. Gradients of watched leaves stay
    // readable via grad() until the next backward() or clear().
    void backward(const TensorT<T>& loss) {
        if (loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        shape_str(loss.shape));
        if (!(loss.bind && loss.bind->tape == id_ && loss.bind->node >= 0))
            throw std::invalid_argument("backward: loss is not recorded on this tape");
        grads_.assign(nodes_.size(), {});
        int start = loss.bind->node;
        grads_[std::size_t(start)] = {T(1)};
        for (int i = start; i >= 0; --i) {
            auto& node = nodes_[std::size_t(i)];
            if (!grads_[std::size_t(i)].empty() && node.backward) {
                node.backward(*this, grads_[std::size_t(i)].data());
                // interior gradient is fully consumed at this point
                std::vector<T>().swap(grads_[std::size_t(i)]);
            }
        }
        ran_backward_ = true;
    }

    // Gradient of a watched tensor; exact zeros when no gradient flowed.
    TensorT<T> grad(const TensorT<T>& t) const {
        if (!ran_backward_) throw std::logic_error("grad: backward() has not run");
        TensorT<T> g(t.shape);
        if (t.bind && t.bind->tape == id_ && t.bind->node >= 0) {
            const auto& buf = grads_[std::size_t(t.bind->node)];
            if (!buf.empty()) std::copy(buf.begin(), buf.end(), g.ptr());
        }
        return g;
    }

    // Drops all recorded state; previously bound tensors become plain
    // constants again (the tape id is retired).
    void clear() {
        nodes_.clear();
        grads_.clear();
        ran_backward_ = false;
        id_ = fresh_id();
    }

    // --- backward-pass plumbing used by op closures ---

    T* buffer(int node, std::size_t n) {
        if (node < 0) return nullptr;
        auto& buf = grads_[std::size_t(node)];
        if (buf.empty()) buf.assign(n, T(0));
        return buf.data();
    }

    void accumulate(int node, const T* g, std::size_t n) {
        T* dst = buffer(node, n);
        if (!dst) return;
        for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
    }

private:
    struct Node {
        BackwardFn backward;  // null for leaves
        std::size_t numel;
    };

    static std::uint64_t fresh_id() {
        static std::atomic<std::uint64_t> next{1};
        return next.fetch_add(1);
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
    std::uint64_t id_;
    bool ran_backward_ = false;

    static thread_local TapeT* current_;

    template <class U>
    friend class TapeScope;
};

template <class T>
thread_local TapeT<T>* TapeT<T>::current_ = nullptr;

using Tape = TapeT<float>;

// Installs a tape as the recording target for the current thread.
template <class T>
class TapeScope {
public:
    explicit TapeScope(TapeT<T>& tape) : prev_(TapeT<T>::current_) { TapeT<T>::current_ = &tape; }
    ~TapeScope() { TapeT<T>::current_ = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    TapeT<T>* prev_;
};

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

}  // namespace detail

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape("add", a, b);
    std::size_t n = a.numel();
    TensorT<T> out(a.shape);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a), nb = tape->node_of(b);
        if (na >= 0 || nb >= 0)
            tape->emit(out, [na, nb, n](TapeT<T>& tp, const T* g) {
                tp.accumulate(na, g, n);
                tp.accumulate(nb, g, n);
            });
    }
    return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape("sub", a, b);
    std::size_t n = a.numel();
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a), nb = tape->node_of(b);
        if (na >= 0 || nb >= 0)
            tape->emit(out, [na, nb, n](TapeT<T>& tp, const T* g) {
                tp.accumulate(na, g, n);
                if (T* gb = tp.buffer(nb, n))
                    for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
            });
    }
    return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape("mul", a, b);
    std::size_t n = a.numel();
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a), nb = tape->node_of(b);
        if (na >= 0 || nb >= 0)
            tape->emit(out, [na, nb, n, ad = a.data, bd = b.data](TapeT<T>& tp, const T* g) {
                if (T* ga = tp.buffer(na, n)) {
                    const T* pb = bd->data();
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
                }
                if (T* gb = tp.buffer(nb, n)) {
                    const T* pa = ad->data();
                    for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
                }
            });
    }
    return out;
}

template <class T>
TensorT<T> add(const TensorT<T>& a, T s) {
    std::size_t n = a.numel();
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + s;
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0)
            tape->emit(out,
                       [na, n](TapeT<T>& tp, const T* g) { tp.accumulate(na, g, n); });
    }
    return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, T s) {
    return add(a, T(-s));
}

template <class T>
TensorT<T> sub(T s, const TensorT<T>& a) {
    std::size_t n = a.numel();
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < n; ++i) out[i] = s - a[i];
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0)
            tape->emit(out, [na, n](TapeT<T>& tp, const T* g) {
                if (T* ga = tp.buffer(na, n))
                    for (std::size_t i = 0; i < n; ++i) ga[i] -= g[i];
            });
    }
    return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, T s) {
    std::size_t n = a.numel();
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * s;
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0)
            tape->emit(out, [na, n, s](TapeT<T>& tp, const T* g) {
                if (T* ga = tp.buffer(na, n))
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
            });
    }
    return out;
}

template <class T>
TensorT<T> exp(const TensorT<T>& a) {
    std::size_t n = a.numel();
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(a[i]);
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0)
            tape->emit(out, [na, n, od = out.data](TapeT<T>& tp, const T* g) {
                if (T* ga = tp.buffer(na, n)) {
                    const T* po = od->data();
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * po[i];
                }
            });
    }
    return out;
}

template <class T>
TensorT<T> log(const TensorT<T>& a) {
    std::size_t n = a.numel();
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::log(a[i]);
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0)
            tape->emit(out, [na, n, ad = a.data](TapeT<T>& tp, const T* g) {
                if (T* ga = tp.buffer(na, n)) {
                    const T* pa = ad->data();
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / pa[i];
                }
            });
    }
    return out;
}

template <class T>
TensorT<T> square(const TensorT<T>& a) {
    std::size_t n = a.numel();
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * a[i];
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0)
            tape->emit(out, [na, n, ad = a.data](TapeT<T>& tp, const T* g) {
                if (T* ga = tp.buffer(na, n)) {
                    const T* pa = ad->data();
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * T(2) * pa[i];
                }
            });
    }
    return out;
}

namespace detail {

template <class T>
T stable_sigmoid(T x) {
    if (x >= T(0)) {
        T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

template <class T>
TensorT<T> sigmoid(const TensorT<T>& a) {
    std::size_t n = a.numel();
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < n; ++i) out[i] = detail::stable_sigmoid(a[i]);
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0)
            tape->emit(out, [na, n, od = out.data](TapeT<T>& tp, const T* g) {
                if (T* ga = tp.buffer(na, n)) {
                    const T* po = od->data();
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * po[i] * (T(1) - po[i]);
                }
            });
    }
    return out;
}

template <class T>
TensorT<T> leaky_relu(const TensorT<T>& a, T alpha) {
    if (!(alpha >= T(0) && alpha <= T(1)))
        throw std::invalid_argument("leaky_relu: alpha must lie in [0,1], got " +
                                    std::to_string(double(alpha)));
    std::size_t n = a.numel();
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > T(0) ? a[i] : alpha * a[i];
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0)
            tape->emit(out, [na, n, alpha, ad = a.data](TapeT<T>& tp, const T* g) {
                if (T* ga = tp.buffer(na, n)) {
                    const T* pa = ad->data();
                    // subgradient alpha at exactly zero
                    for (std::size_t i = 0; i < n; ++i)
                        ga[i] += g[i] * (pa[i] > T(0) ? T(1) : alpha);
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> sum(const TensorT<T>& a) {
    std::size_t n = a.numel();
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    TensorT<T> out = TensorT<T>::scalar(acc);
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0)
            tape->emit(out, [na, n](TapeT<T>& tp, const T* g) {
                if (T* ga = tp.buffer(na, n))
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
            });
    }
    return out;
}

template <class T>
TensorT<T> mean(const TensorT<T>& a) {
    std::size_t n = a.numel();
    if (n == 0) throw std::invalid_argument("mean: empty tensor");
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    TensorT<T> out = TensorT<T>::scalar(acc / T(n));
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0)
            tape->emit(out, [na, n](TapeT<T>& tp, const T* g) {
                if (T* ga = tp.buffer(na, n)) {
                    T s = g[0] / T(n);
                    for (std::size_t i = 0; i < n; ++i) ga[i] += s;
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> reshape(const TensorT<T>& a, Shape s) {
    TensorT<T> out = a.viewed(std::move(s));
    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0) {
            std::size_t n = a.numel();
            tape->emit(out,
                       [na, n](TapeT<T>& tp, const T* g) { tp.accumulate(na, g, n); });
        }
    }
    return out;
}

template <class T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no parts");
    const Shape& base = parts[0].shape;
    if (axis < 0 || axis >= int(base.size()))
        throw std::invalid_argument("concat: axis " + std::to_string(axis) + " out of range for " +
                                    shape_str(base));
    Shape out_shape = base;
    out_shape[std::size_t(axis)] = 0;
    for (const auto& p : parts) {
        if (p.rank() != int(base.size()))
            throw std::invalid_argument("concat: rank mismatch " + shape_str(p.shape) + " vs " +
                                        shape_str(base));
        for (int d = 0; d < int(base.size()); ++d)
            if (d != axis && p.shape[std::size_t(d)] != base[std::size_t(d)])
                throw std::invalid_argument("concat: extent mismatch " + shape_str(p.shape) +
                                            " vs " + shape_str(base) + " along axis " +
                                            std::to_string(d));
        out_shape[std::size_t(axis)] += p.shape[std::size_t(axis)];
    }

    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= std::size_t(base[std::size_t(d)]);
    for (int d = axis + 1; d < int(base.size()); ++d) inner *= std::size_t(base[std::size_t(d)]);

    TensorT<T> out(out_shape);
    std::size_t out_axis = std::size_t(out_shape[std::size_t(axis)]);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::size_t pa = std::size_t(p.shape[std::size_t(axis)]);
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(out.ptr() + (o * out_axis + offset) * inner,
                        p.ptr() + o * pa * inner, pa * inner * sizeof(T));
        offset += pa;
    }

    if (auto* tape = TapeT<T>::current()) {
        std::vector<int> ids(parts.size());
        std::vector<std::size_t> extents(parts.size());
        bool any = false;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            ids[i] = tape->node_of(parts[i]);
            extents[i] = std::size_t(parts[i].shape[std::size_t(axis)]);
            any = any || ids[i] >= 0;
        }
        if (any)
            tape->emit(out, [ids, extents, outer, inner, out_axis](TapeT<T>& tp, const T* g) {
                std::size_t offset = 0;
                for (std::size_t i = 0; i < ids.size(); ++i) {
                    std::size_t pa = extents[i];
                    if (T* gp = tp.buffer(ids[i], outer * pa * inner)) {
                        for (std::size_t o = 0; o < outer; ++o) {
                            const T* src = g + (o * out_axis + offset) * inner;
                            T* dst = gp + o * pa * inner;
                            for (std::size_t k = 0; k < pa * inner; ++k) dst[k] += src[k];
                        }
                    }
                    offset += pa;
                }
            });
    }
    return out;
}

template <class T>
TensorT<T> slice(const TensorT<T>& a, int axis, int start, int len) {
    if (axis < 0 || axis >= a.rank())
        throw std::invalid_argument("slice: axis " + std::to_string(axis) + " out of range for " +
                                    shape_str(a.shape));
    int e = a.extent(axis);
    if (start < 0 || len < 0 || start + len > e)
        throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") outside extent " +
                                    std::to_string(e));
    Shape out_shape = a.shape;
    out_shape[std::size_t(axis)] = len;

    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= std::size_t(a.shape[std::size_t(d)]);
    for (int d = axis + 1; d < a.rank(); ++d) inner *= std::size_t(a.shape[std::size_t(d)]);

    TensorT<T> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(out.ptr() + o * std::size_t(len) * inner,
                    a.ptr() + (o * std::size_t(e) + std::size_t(start)) * inner,
                    std::size_t(len) * inner * sizeof(T));

    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0) {
            std::size_t an = a.numel();
            tape->emit(out, [na, an, outer, inner, e, start, len](TapeT<T>& tp, const T* g) {
                if (T* ga = tp.buffer(na, an))
                    for (std::size_t o = 0; o < outer; ++o) {
                        T* dst = ga + (o * std::size_t(e) + std::size_t(start)) * inner;
                        const T* src = g + o * std::size_t(len) * inner;
                        for (std::size_t k = 0; k < std::size_t(len) * inner; ++k) dst[k] += src[k];
                    }
            });
        }
    }
    return out;
}

// Pads `count` planes of `value` at the end of `axis`.
template <class T>
TensorT<T> pad_end(const TensorT<T>& a, int axis, int count, T value) {
    if (axis < 0 || axis >= a.rank())
        throw std::invalid_argument("pad_end: axis " + std::to_string(axis) +
                                    " out of range for " + shape_str(a.shape));
    if (count < 0) throw std::invalid_argument("pad_end: negative count");
    if (count == 0) return a;
    Shape out_shape = a.shape;
    out_shape[std::size_t(axis)] += count;

    std::size_t outer = 1, inner = 1;
    int e = a.extent(axis);
    for (int d = 0; d < axis; ++d) outer *= std::size_t(a.shape[std::size_t(d)]);
    for (int d = axis + 1; d < a.rank(); ++d) inner *= std::size_t(a.shape[std::size_t(d)]);

    TensorT<T> out = TensorT<T>::full(out_shape, value);
    std::size_t oe = std::size_t(e + count);
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(out.ptr() + o * oe * inner, a.ptr() + o * std::size_t(e) * inner,
                    std::size_t(e) * inner * sizeof(T));

    if (auto* tape = TapeT<T>::current()) {
        int na = tape->node_of(a);
        if (na >= 0) {
            std::size_t an = a.numel();
            tape->emit(out, [na, an, outer, inner, e, oe](TapeT<T>& tp, const T* g) {
                if (T* ga = tp.buffer(na, an))
                    for (std::size_t o = 0; o < outer; ++o) {
                        T* dst = ga + o * std::size_t(e) * inner;
                        const T* src = g + o * oe * inner;
                        for (std::size_t k = 0; k < std::size_t(e) * inner; ++k) dst[k] += src[k];
                    }
            });
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// neural-net ops
// ---------------------------------------------------------------------------

namespace detail {

// Normalizes [n] / [B,n] inputs to a (batch, features) view.
template <class T>
void dense_dims(const TensorT<T>& x, std::size_t& batch, std::size_t& feat) {
    if (x.rank() == 1) {
        batch = 1;
        feat = std::size_t(x.extent(0));
    } else if (x.rank() == 2) {
        batch = std::size_t(x.extent(0));
        feat = std::size_t(x.extent(1));
    } else {
        throw std::invalid_argument("dense: input must be rank 1 or 2, got " +
                                    shape_str(x.shape));
    }
}

}  // namespace detail

template <class T>
TensorT<T> dense(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
    std::size_t batch, in;
    detail::dense_dims(x, batch, in);
    if (w.rank() != 2 || std::size_t(w.extent(0)) != in)
        throw std::invalid_argument("dense: weight " + shape_str(w.shape) +
                                    " does not match input " + shape_str(x.shape));
    std::size_t out_dim = std::size_t(w.extent(1));
    if (bias.rank() != 1 || std::size_t(bias.extent(0)) != out_dim)
        throw std::invalid_argument("dense: bias " + shape_str(bias.shape) +
                                    " does not match weight " + shape_str(w.shape));

    Shape out_shape = x.rank() == 1 ? Shape{int(out_dim)} : Shape{int(batch), int(out_dim)};
    TensorT<T> out(out_shape);
    const T* px = x.ptr();
    const T* pw = w.ptr();
    const T* pb = bias.ptr();
    T* po = out.ptr();
    for (std::size_t b = 0; b < batch; ++b) {
        T* row = po + b * out_dim;
        std::memcpy(row, pb, out_dim * sizeof(T));
        const T* xr = px + b * in;
        for (std::size_t i = 0; i < in; ++i) {
            T xv = xr[i];
            const T* wr = pw + i * out_dim;
            for (std::size_t j = 0; j < out_dim; ++j) row[j] += xv * wr[j];
        }
    }

    if (auto* tape = TapeT<T>::current()) {
        int nx = tape->node_of(x), nw = tape->node_of(w), nb = tape->node_of(bias);
        if (nx >= 0 || nw >= 0 || nb >= 0)
            tape->emit(out, [nx, nw, nb, batch, in, out_dim, xd = x.data,
                             wd = w.data](TapeT<T>& tp, const T* g) {
                if (T* gx = tp.buffer(nx, batch * in)) {
                    const T* pw = wd->data();
                    for (std::size_t b = 0; b < batch; ++b)
                        for (std::size_t i = 0; i < in; ++i) {
                            const T* wr = pw + i * out_dim;
                            const T* gr = g + b * out_dim;
                            T acc = T(0);
                            for (std::size_t j = 0; j < out_dim; ++j) acc += gr[j] * wr[j];
                            gx[b * in + i] += acc;
                        }
                }
                if (T* gw = tp.buffer(nw, in * out_dim)) {
                    const T* px = xd->data();
                    for (std::size_t b = 0; b < batch; ++b)
                        for (std::size_t i = 0; i < in; ++i) {
                            T xv = px[b * in + i];
                            const T* gr = g + b * out_dim;
                            T* wr = gw + i * out_dim;
                            for (std::size_t j = 0; j < out_dim; ++j) wr[j] += xv * gr[j];
                        }
                }
                if (T* gb = tp.buffer(nb, out_dim)) {
                    for (std::size_t b = 0; b < batch; ++b)
                        for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[b * out_dim + j];
                }
            });
    }
    return out;
}

namespace detail {

// Spatial dims of [D,H,W,C] / [B,D,H,W,C] tensors.
template <class T>
void conv3d_dims(const char* op, const TensorT<T>& x, std::size_t& batch, int& d, int& h, int& w,
                 int& c) {
    if (x.rank() == 4) {
        batch = 1;
        d = x.extent(0);
        h = x.extent(1);
        w = x.extent(2);
        c = x.extent(3);
    } else if (x.rank() == 5) {
        batch = std::size_t(x.extent(0));
        d = x.extent(1);
        h = x.extent(2);
        w = x.extent(3);
        c = x.extent(4);
    } else {
        throw std::invalid_argument(std::string(op) + ": input must be rank 4 or 5, got " +
                                    shape_str(x.shape));
    }
}

}  // namespace detail

// 3x3x3 stride-1 zero-padded cross-correlation; spatial extents preserved.
template <class T>
TensorT<T> conv3d_same(const TensorT<T>& x, const TensorT<T>& kernel, const TensorT<T>& bias) {
    std::size_t batch;
    int D, H, W, Ci;
    detail::conv3d_dims("conv3d_same", x, batch, D, H, W, Ci);
    if (kernel.rank() != 5 || kernel.extent(0) != 3 || kernel.extent(1) != 3 ||
        kernel.extent(2) != 3)
        throw std::invalid_argument("conv3d_same: kernel must be [3,3,3,Cin,Cout], got " +
                                    shape_str(kernel.shape));
    if (kernel.extent(3) != Ci)
        throw std::invalid_argument("conv3d_same: channel mismatch, input has " +
                                    std::to_string(Ci) + " channels but kernel expects " +
                                    std::to_string(kernel.extent(3)));
    int Co = kernel.extent(4);
    if (bias.rank() != 1 || bias.extent(0) != Co)
        throw std::invalid_argument("conv3d_same: bias " + shape_str(bias.shape) +
                                    " does not match " + std::to_string(Co) + " output channels");
    if (D < 1 || H < 1 || W < 1)
        throw std::invalid_argument("conv3d_same: empty spatial extents in " +
                                    shape_str(x.shape));

    Shape out_shape = x.shape;
    out_shape.back() = Co;
    TensorT<T> out(out_shape);

    const T* px = x.ptr();
    const T* pk = kernel.ptr();
    const T* pb = bias.ptr();
    T* po = out.ptr();
    const std::size_t in_plane = std::size_t(D) * H * W * Ci;
    const std::size_t out_plane = std::size_t(D) * H * W * Co;

    for (std::size_t b = 0; b < batch; ++b) {
        const T* xb = px + b * in_plane;
        T* ob = po + b * out_plane;
        for (int d = 0; d < D; ++d)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    T* orow = ob + ((std::size_t(d) * H + h) * W + w) * Co;
                    std::memcpy(orow, pb, std::size_t(Co) * sizeof(T));
                    for (int kd = 0; kd < 3; ++kd) {
                        int id = d + kd - 1;
                        if (id < 0 || id >= D) continue;
                        for (int kh = 0; kh < 3; ++kh) {
                            int ih = h + kh - 1;
                            if (ih < 0 || ih >= H) continue;
                            for (int kw = 0; kw < 3; ++kw) {
                                int iw = w + kw - 1;
                                if (iw < 0 || iw >= W) continue;
                                const T* xrow = xb + ((std::size_t(id) * H + ih) * W + iw) * Ci;
                                const T* krow = pk + ((std::size_t(kd) * 3 + kh) * 3 + kw) * Ci * Co;
                                for (int ci = 0; ci < Ci; ++ci) {
                                    T xv = xrow[ci];
                                    const T* kc = krow + std::size_t(ci) * Co;
                                    for (int co = 0; co < Co; ++co) orow[co] += xv * kc[co];
                                }
                            }
                        }
                    }
                }
    }

    if (auto* tape = TapeT<T>::current()) {
        int nx = tape->node_of(x), nk = tape->node_of(kernel), nb = tape->node_of(bias);
        if (nx >= 0 || nk >= 0 || nb >= 0)
            tape->emit(out, [nx, nk, nb, batch, D, H, W, Ci, Co, in_plane, out_plane, xd = x.data,
                             kd_ = kernel.data](TapeT<T>& tp, const T* g) {
                T* gx = tp.buffer(nx, batch * in_plane);
                T* gk = tp.buffer(nk, std::size_t(27) * Ci * Co);
                T* gb = tp.buffer(nb, std::size_t(Co));
                const T* px = xd->data();
                const T* pk = kd_->data();
                for (std::size_t b = 0; b < batch; ++b) {
                    const T* xb = px + b * in_plane;
                    const T* gout = g + b * out_plane;
                    T* gxb = gx ? gx + b * in_plane : nullptr;
                    for (int d = 0; d < D; ++d)
                        for (int h = 0; h < H; ++h)
                            for (int w = 0; w < W; ++w) {
                                const T* grow = gout + ((std::size_t(d) * H + h) * W + w) * Co;
                                if (gb)
                                    for (int co = 0; co < Co; ++co) gb[co] += grow[co];
                                for (int kd = 0; kd < 3; ++kd) {
                                    int id = d + kd - 1;
                                    if (id < 0 || id >= D) continue;
                                    for (int kh = 0; kh < 3; ++kh) {
                                        int ih = h + kh - 1;
                                        if (ih < 0 || ih >= H) continue;
                                        for (int kw = 0; kw < 3; ++kw) {
                                            int iw = w + kw - 1;
                                            if (iw < 0 || iw >= W) continue;
                                            std::size_t xoff =
                                                ((std::size_t(id) * H + ih) * W + iw) * Ci;
                                            std::size_t koff =
                                                ((std::size_t(kd) * 3 + kh) * 3 + kw) *
                                                std::size_t(Ci) * Co;
                                            for (int ci = 0; ci < Ci; ++ci) {
                                                const T* kc = pk + koff + std::size_t(ci) * Co;
                                                if (gxb) {
                                                    T acc = T(0);
                                                    for (int co = 0; co < Co; ++co)
                                                        acc += grow[co] * kc[co];
                                                    gxb[xoff + std::size_t(ci)] += acc;
                                                }
                                                if (gk) {
                                                    T xv = xb[xoff + std::size_t(ci)];
                                                    T* gkc = gk + koff + std::size_t(ci) * Co;
                                                    for (int co = 0; co < Co; ++co)
                                                        gkc[co] += xv * grow[co];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                }
            });
    }
    return out;
}

// 2D 'same' cross-correlation with configurable stride, for [H,W,C] or
// [B,H,W,C] inputs. Output extent per axis is ceil(extent / stride).
template <class T>
TensorT<T> conv2d_same(const TensorT<T>& x, const TensorT<T>& kernel, const TensorT<T>& bias,
                       int stride) {
    std::size_t batch;
    int H, W, Ci;
    if (x.rank() == 3) {
        batch = 1;
        H = x.extent(0);
        W = x.extent(1);
        Ci = x.extent(2);
    } else if (x.rank() == 4) {
        batch = std::size_t(x.extent(0));
        H = x.extent(1);
        W = x.extent(2);
        Ci = x.extent(3);
    } else {
        throw std::invalid_argument("conv2d_same: input must be rank 3 or 4, got " +
                                    shape_str(x.shape));
    }
    if (kernel.rank() != 4)
        throw std::invalid_argument("conv2d_same: kernel must be [kh,kw,Cin,Cout], got " +
                                    shape_str(kernel.shape));
    int Kh = kernel.extent(0), Kw = kernel.extent(1);
    if (kernel.extent(2) != Ci)
        throw std::invalid_argument("conv2d_same: channel mismatch, input has " +
                                    std::to_string(Ci) + " channels but kernel expects " +
                                    std::to_string(kernel.extent(2)));
    int Co = kernel.extent(3);
    if (bias.rank() != 1 || bias.extent(0) != Co)
        throw std::invalid_argument("conv2d_same: bias " + shape_str(bias.shape) +
                                    " does not match " + std::to_string(Co) + " output channels");
    if (stride < 1) throw std::invalid_argument("conv2d_same: stride must be >= 1");

    int Ho = (H + stride - 1) / stride;
    int Wo = (W + stride - 1) / stride;
    int pad_h = std::max((Ho - 1) * stride + Kh - H, 0) / 2;
    int pad_w = std::max((Wo - 1) * stride + Kw - W, 0) / 2;

    Shape out_shape = x.rank() == 3 ? Shape{Ho, Wo, Co} : Shape{int(batch), Ho, Wo, Co};
    TensorT<T> out(out_shape);

    const T* px = x.ptr();
    const T* pk = kernel.ptr();
    const T* pb = bias.ptr();
    T* po = out.ptr();
    const std::size_t in_plane = std::size_t(H) * W * Ci;
    const std::size_t out_plane = std::size_t(Ho) * Wo * Co;

    for (std::size_t b = 0; b < batch; ++b) {
        const T* xb = px + b * in_plane;
        T* ob = po + b * out_plane;
        for (int ho = 0; ho < Ho; ++ho)
            for (int wo = 0; wo < Wo; ++wo) {
                T* orow = ob + (std::size_t(ho) * Wo + wo) * Co;
                std::memcpy(orow, pb, std::size_t(Co) * sizeof(T));
                for (int kh = 0; kh < Kh; ++kh) {
                    int ih = ho * stride + kh - pad_h;
                    if (ih < 0 || ih >= H) continue;
                    for (int kw = 0; kw < Kw; ++kw) {
                        int iw = wo * stride + kw - pad_w;
                        if (iw < 0 || iw >= W) continue;
                        const T* xrow = xb + (std::size_t(ih) * W + iw) * Ci;
                        const T* krow = pk + (std::size_t(kh) * Kw + kw) * Ci * Co;
                        for (int ci = 0; ci < Ci; ++ci) {
                            T xv = xrow[ci];
                            const T* kc = krow + std::size_t(ci) * Co;
                            for (int co = 0; co < Co; ++co) orow[co] += xv * kc[co];
                        }
                    }
                }
            }
    }

    if (auto* tape = TapeT<T>::current()) {
        int nx = tape->node_of(x), nk = tape->node_of(kernel), nb = tape->node_of(bias);
        if (nx >= 0 || nk >= 0 || nb >= 0)
            tape->emit(out, [nx, nk, nb, batch, H, W, Ci, Co, Ho, Wo, Kh, Kw, pad_h, pad_w, stride,
                             in_plane, out_plane, xd = x.data,
                             kd_ = kernel.data](TapeT<T>& tp, const T* g) {
                T* gx = tp.buffer(nx, batch * in_plane);
                T* gk = tp.buffer(nk, std::size_t(Kh) * Kw * Ci * Co);
                T* gb = tp.buffer(nb, std::size_t(Co));
                const T* px = xd->data();
                const T* pk = kd_->data();
                for (std::size_t b = 0; b < batch; ++b) {
                    const T* xb = px + b * in_plane;
                    const T* gout = g + b * out_plane;
                    T* gxb = gx ? gx + b * in_plane : nullptr;
                    for (int ho = 0; ho < Ho; ++ho)
                        for (int wo = 0; wo < Wo; ++wo) {
                            const T* grow = gout + (std::size_t(ho) * Wo + wo) * Co;
                            if (gb)
                                for (int co = 0; co < Co; ++co) gb[co] += grow[co];
                            for (int kh = 0; kh < Kh; ++kh) {
                                int ih = ho * stride + kh - pad_h;
                                if (ih < 0 || ih >= H) continue;
                                for (int kw = 0; kw < Kw; ++kw) {
                                    int iw = wo * stride + kw - pad_w;
                                    if (iw < 0 || iw >= W) continue;
                                    std::size_t xoff = (std::size_t(ih) * W + iw) * Ci;
                                    std::size_t koff =
                                        (std::size_t(kh) * Kw + kw) * std::size_t(Ci) * Co;
                                    for (int ci = 0; ci < Ci; ++ci) {
                                        const T* kc = pk + koff + std::size_t(ci) * Co;
                                        if (gxb) {
                                            T acc = T(0);
                                            for (int co = 0; co < Co; ++co)
                                                acc += grow[co] * kc[co];
                                            gxb[xoff + std::size_t(ci)] += acc;
                                        }
                                        if (gk) {
                                            T xv = xb[xoff + std::size_t(ci)];
                                            T* gkc = gk + koff + std::size_t(ci) * Co;
                                            for (int co = 0; co < Co; ++co)
                                                gkc[co] += xv * grow[co];
                                        }
                                    }
                                }
                            }
                        }
                }
            });
    }
    return out;
}

// 2x2x2 stride-2 max pooling; gradient routes to the first maximal element
// in scan order.
template <class T>
TensorT<T> maxpool3d(const TensorT<T>& x) {
    std::size_t batch;
    int D, H, W, C;
    detail::conv3d_dims("maxpool3d", x, batch, D, H, W, C);
    if (D % 2 || H % 2 || W % 2)
        throw std::invalid_argument("maxpool3d: spatial extents must be even, got " +
                                    shape_str(x.shape));

    int Do = D / 2, Ho = H / 2, Wo = W / 2;
    Shape out_shape = x.rank() == 4 ? Shape{Do, Ho, Wo, C}
                                    : Shape{int(batch), Do, Ho, Wo, C};
    TensorT<T> out(out_shape);
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out.numel());

    const T* px = x.ptr();
    T* po = out.ptr();
    std::int64_t* pam = argmax->data();
    const std::size_t in_plane = std::size_t(D) * H * W * C;
    const std::size_t out_plane = std::size_t(Do) * Ho * Wo * C;

    for (std::size_t b = 0; b < batch; ++b)
        for (int d = 0; d < Do; ++d)
            for (int h = 0; h < Ho; ++h)
                for (int w = 0; w < Wo; ++w)
                    for (int c = 0; c < C; ++c) {
                        T best = -std::numeric_limits<T>::infinity();
                        std::int64_t best_idx = -1;
                        for (int kd = 0; kd < 2; ++kd)
                            for (int kh = 0; kh < 2; ++kh)
                                for (int kw = 0; kw < 2; ++kw) {
                                    std::size_t idx =
                                        b * in_plane +
                                        ((std::size_t(2 * d + kd) * H + (2 * h + kh)) * W +
                                         (2 * w + kw)) *
                                            C +
                                        std::size_t(c);
                                    if (px[idx] > best) {
                                        best = px[idx];
                                        best_idx = std::int64_t(idx);
                                    }
                                }
                        std::size_t oidx = b * out_plane +
                                           ((std::size_t(d) * Ho + h) * Wo + w) * C +
                                           std::size_t(c);
                        po[oidx] = best;
                        pam[oidx] = best_idx;
                    }

    if (auto* tape = TapeT<T>::current()) {
        int nx = tape->node_of(x);
        if (nx >= 0) {
            std::size_t on = out.numel(), in = x.numel();
            tape->emit(out, [nx, on, in, argmax](TapeT<T>& tp, const T* g) {
                if (T* gx = tp.buffer(nx, in)) {
                    const std::int64_t* pam = argmax->data();
                    for (std::size_t i = 0; i < on; ++i) gx[pam[i]] += g[i];
                }
            });
        }
    }
    return out;
}

// Nearest-neighbor 2x upsampling of every spatial axis; gradient sums over
// each replicated block.
template <class T>
TensorT<T> upsample3d(const TensorT<T>& x) {
    std::size_t batch;
    int D, H, W, C;
    detail::conv3d_dims("upsample3d", x, batch, D, H, W, C);
    int Do = 2 * D, Ho = 2 * H, Wo = 2 * W;
    Shape out_shape = x.rank() == 4 ? Shape{Do, Ho, Wo, C}
                                    : Shape{int(batch), Do, Ho, Wo, C};
    TensorT<T> out(out_shape);

    const T* px = x.ptr();
    T* po = out.ptr();
    const std::size_t in_plane = std::size_t(D) * H * W * C;
    const std::size_t out_plane = std::size_t(Do) * Ho * Wo * C;

    for (std::size_t b = 0; b < batch; ++b)
        for (int d = 0; d < Do; ++d)
            for (int h = 0; h < Ho; ++h)
                for (int w = 0; w < Wo; ++w) {
                    const T* src = px + b * in_plane +
                                   ((std::size_t(d / 2) * H + (h / 2)) * W + (w / 2)) * C;
                    T* dst = po + b * out_plane + ((std::size_t(d) * Ho + h) * Wo + w) * C;
                    std::memcpy(dst, src, std::size_t(C) * sizeof(T));
                }

    if (auto* tape = TapeT<T>::current()) {
        int nx = tape->node_of(x);
        if (nx >= 0) {
            std::size_t in = x.numel();
            tape->emit(out, [nx, in, batch, D, H, W, C, Do, Ho, Wo, in_plane,
                             out_plane](TapeT<T>& tp, const T* g) {
                if (T* gx = tp.buffer(nx, in))
                    for (std::size_t b = 0; b < batch; ++b)
                        for (int d = 0; d < Do; ++d)
                            for (int h = 0; h < Ho; ++h)
                                for (int w = 0; w < Wo; ++w) {
                                    T* dst = gx + b * in_plane +
                                             ((std::size_t(d / 2) * H + (h / 2)) * W + (w / 2)) * C;
                                    const T* src =
                                        g + b * out_plane +
                                        ((std::size_t(d) * Ho + h) * Wo + w) * C;
                                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                                }
            });
        }
    }
    return out;
}

struct BatchNormOpts {
    bool train = true;
    bool update_stats = true;  // ignored in eval mode
    double momentum = 0.99;
    double eps = 1e-3;
};

// Per-channel normalization over all leading axes (channels last). Train
// mode uses batch statistics and optionally folds them into the running
// stats; eval mode normalizes by the running stats.
template <class T>
TensorT<T> batchnorm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                     TensorT<T>& running_mean, TensorT<T>& running_var,
                     const BatchNormOpts& opts) {
    if (x.rank() < 1) throw std::invalid_argument("batchnorm: scalar input");
    int C = x.shape.back();
    std::size_t n = x.numel();
    if (n == 0) throw std::invalid_argument("batchnorm: zero batch size");
    std::size_t rows = n / std::size_t(C);
    auto check_c = [&](const char* name, const TensorT<T>& t) {
        if (t.rank() != 1 || t.extent(0) != C)
            throw std::invalid_argument(std::string("batchnorm: ") + name + " " +
                                        shape_str(t.shape) + " does not match " +
                                        std::to_string(C) + " channels");
    };
    check_c("gamma", gamma);
    check_c("beta", beta);
    check_c("running_mean", running_mean);
    check_c("running_var", running_var);

    const std::size_t nc = std::size_t(C);
    std::vector<T> mean_c(nc), var_c(nc);
    const T* px = x.ptr();
    if (opts.train) {
        std::vector<T> sum_c(std::size_t(C), T(0));
        for (std::size_t r = 0; r < rows; ++r) {
            const T* row = px + r * std::size_t(C);
            for (int c = 0; c < C; ++c) sum_c[std::size_t(c)] += row[c];
        }
        for (int c = 0; c < C; ++c) mean_c[std::size_t(c)] = sum_c[std::size_t(c)] / T(rows);
        std::vector<T> sq_c(std::size_t(C), T(0));
        for (std::size_t r = 0; r < rows; ++r) {
            const T* row = px + r * std::size_t(C);
            for (int c = 0; c < C; ++c) {
                T d = row[c] - mean_c[std::size_t(c)];
                sq_c[std::size_t(c)] += d * d;
            }
        }
        for (int c = 0; c < C; ++c) var_c[std::size_t(c)] = sq_c[std::size_t(c)] / T(rows);
        if (opts.update_stats) {
            T mom = T(opts.momentum);
            for (int c = 0; c < C; ++c) {
                running_mean[std::size_t(c)] =
                    mom * running_mean[std::size_t(c)] + (T(1) - mom) * mean_c[std::size_t(c)];
                running_var[std::size_t(c)] =
                    mom * running_var[std::size_t(c)] + (T(1) - mom) * var_c[std::size_t(c)];
            }
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean_c[std::size_t(c)] = running_mean[std::size_t(c)];
            var_c[std::size_t(c)] = running_var[std::size_t(c)];
        }
    }

    auto inv_c = std::make_shared<std::vector<T>>(std::size_t(C));
    for (int c = 0; c < C; ++c)
        (*inv_c)[std::size_t(c)] = T(1) / std::sqrt(var_c[std::size_t(c)] + T(opts.eps));

    TensorT<T> out(x.shape);
    auto xhat = std::make_shared<std::vector<T>>(n);
    const T* pg = gamma.ptr();
    const T* pbeta = beta.ptr();
    T* po = out.ptr();
    T* ph = xhat->data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = px + r * std::size_t(C);
        T* orow = po + r * std::size_t(C);
        T* hrow = ph + r * std::size_t(C);
        for (int c = 0; c < C; ++c) {
            T h = (row[c] - mean_c[std::size_t(c)]) * (*inv_c)[std::size_t(c)];
            hrow[c] = h;
            orow[c] = pg[c] * h + pbeta[c];
        }
    }

    if (auto* tape = TapeT<T>::current()) {
        int nx = tape->node_of(x), ng = tape->node_of(gamma), nb = tape->node_of(beta);
        if (nx >= 0 || ng >= 0 || nb >= 0) {
            bool train = opts.train;
            tape->emit(out, [nx, ng, nb, rows, C, n, train, xhat, inv_c,
                             gd = gamma.data](TapeT<T>& tp, const T* g) {
                const T* ph = xhat->data();
                if (T* gg = tp.buffer(ng, std::size_t(C)))
                    for (std::size_t r = 0; r < rows; ++r)
                        for (int c = 0; c < C; ++c)
                            gg[c] += g[r * std::size_t(C) + c] * ph[r * std::size_t(C) + c];
                if (T* gb = tp.buffer(nb, std::size_t(C)))
                    for (std::size_t r = 0; r < rows; ++r)
                        for (int c = 0; c < C; ++c) gb[c] += g[r * std::size_t(C) + c];
                if (T* gx = tp.buffer(nx, n)) {
                    const T* pg = gd->data();
                    const T* inv = inv_c->data();
                    if (train) {
                        // dx = gamma*inv/N * (N*g - sum(g) - xhat * sum(g*xhat))
                        std::vector<T> sg(std::size_t(C), T(0)), sgh(std::size_t(C), T(0));
                        for (std::size_t r = 0; r < rows; ++r)
                            for (int c = 0; c < C; ++c) {
                                sg[std::size_t(c)] += g[r * std::size_t(C) + c];
                                sgh[std::size_t(c)] +=
                                    g[r * std::size_t(C) + c] * ph[r * std::size_t(C) + c];
                            }
                        for (std::size_t r = 0; r < rows; ++r)
                            for (int c = 0; c < C; ++c) {
                                std::size_t i = r * std::size_t(C) + c;
                                gx[i] += pg[c] * inv[c] / T(rows) *
                                         (T(rows) * g[i] - sg[std::size_t(c)] -
                                          ph[i] * sgh[std::size_t(c)]);
                            }
                    } else {
                        for (std::size_t r = 0; r < rows; ++r)
                            for (int c = 0; c < C; ++c) {
                                std::size_t i = r * std::size_t(C) + c;
                                gx[i] += g[i] * pg[c] * inv[c];
                            }
                    }
                }
            });
        }
    }
    return out;
}

// Inverted dropout: zeros each element with probability `rate` and scales
// survivors by 1/(1-rate). Eval mode and rate 0 are bitwise identity.
template <class T>
TensorT<T> dropout(const TensorT<T>& x, double rate, bool train, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw std::invalid_argument("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    if (!train || rate == 0.0) return x;

    std::size_t n = x.numel();
    auto mask = std::make_shared<std::vector<T>>(n);
    T keep_scale = T(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < n; ++i)
        (*mask)[i] = rng.uniform() < rate ? T(0) : keep_scale;

    TensorT<T> out(x.shape);
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * (*mask)[i];

    if (auto* tape = TapeT<T>::current()) {
        int nx = tape->node_of(x);
        if (nx >= 0)
            tape->emit(out, [nx, n, mask](TapeT<T>& tp, const T* g) {
                if (T* gx = tp.buffer(nx, n))
                    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (*mask)[i];
            });
    }
    return out;
}

// Mean binary cross-entropy of sigmoid(logits) against a {0,1} target,
// computed in the numerically stable logits form.
template <class T>
TensorT<T> bce_with_logits_mean(const TensorT<T>& logits, const TensorT<T>& target) {
    detail::check_same_shape("bce_with_logits_mean", logits, target);
    std::size_t n = logits.numel();
    if (n == 0) throw std::invalid_argument("bce_with_logits_mean: empty tensor");
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        T t = target[i];
        if (t != T(0) && t != T(1))
            throw std::invalid_argument("bce_with_logits_mean: target value " +
                                        std::to_string(double(t)) + " at index " +
                                        std::to_string(i) + " is not in {0,1}");
        T x = logits[i];
        acc += std::max(x, T(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    TensorT<T> out = TensorT<T>::scalar(acc / T(n));

    if (auto* tape = TapeT<T>::current()) {
        int nx = tape->node_of(logits);
        if (nx >= 0)
            tape->emit(out, [nx, n, xd = logits.data, td = target.data](TapeT<T>& tp, const T* g) {
                if (T* gx = tp.buffer(nx, n)) {
                    const T* px = xd->data();
                    const T* pt = td->data();
                    T s = g[0] / T(n);
                    for (std::size_t i = 0; i < n; ++i)
                        gx[i] += s * (detail::stable_sigmoid(px[i]) - pt[i]);
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// initialization and the finite-difference oracle
// ---------------------------------------------------------------------------

template <class T>
void fill_uniform(TensorT<T>& t, Rng& rng, double lo, double hi) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = T(rng.uniform(lo, hi));
}

template <class T>
void fill_normal(TensorT<T>& t, Rng& rng) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = T(rng.normal());
}

// Fan-scaled uniform init with bound sqrt(6 / (fan_in + fan_out)).
template <class T>
void fill_fan_uniform(TensorT<T>& t, Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    double bound = std::sqrt(6.0 / double(fan_in + fan_out));
    fill_uniform(t, rng, -bound, bound);
}

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per element. Runs the
// probe function in 64-bit arithmetic; callers cast float tensors first.
template <class F>
DTensor finite_diff_grad(F&& f, const DTensor& x, double h) {
    if (!(h > 0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
    DTensor g(x.shape);
    DTensor probe = x.clone();
    for (std::size_t i = 0; i < x.numel(); ++i) {
        double orig = probe[i];
        probe[i] = orig + h;
        double fp = f(probe);
        probe[i] = orig - h;
        double fm = f(probe);
        probe[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace voxcvae
