#pragma once

// Minimal dense tensor with reverse-mode automatic differentiation.
//
// A TapeT records one forward pass as an append-only node list; every op
// allocates a fresh output buffer, so tensors are value-semantic handles that
// can be copied and moved across threads freely. The tape is rebuilt for each
// forward pass. Gradients are allocated lazily: backward() walks the node list
// in reverse and only runs nodes whose output gradient was touched, so
// parameters not reachable from the loss keep their grad buffers untouched.
//
// Every op checks its output for NaN/Inf and throws NumericError naming the
// op; backward does the same for each consumed gradient buffer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "avloc/errors.hpp"

namespace avloc {

using Mask = std::vector<std::uint8_t>;

template <typename S>
struct ParamT {
    std::string name;
    std::vector<int> shape;
    std::vector<S> value;
    std::vector<S> grad;
    std::vector<S> adam_m;
    std::vector<S> adam_v;
    std::int64_t step_count = 0;

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline std::int64_t shape_numel(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

template <typename S>
void check_finite(const char* op, const std::vector<S>& v) {
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
        }
    }
}

template <typename S>
class TensorT;

template <typename S>
class TapeT {
public:
    // Receives the node's own output gradient; pushes into parents/params.
    using BackwardFn = std::function<void(TapeT&, const std::vector<S>&)>;

    int add_node(const char* op, BackwardFn bw) {
        nodes_.push_back(Node{op, std::move(bw)});
        grads_.emplace_back();
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Grad buffer of `node`, allocated zero-filled on first touch.
    std::vector<S>& grad_accum(int node, size_t n) {
        auto& g = grads_[static_cast<size_t>(node)];
        if (g.empty()) g.assign(n, S(0));
        return g;
    }

    // Null when no gradient ever reached `node`.
    const std::vector<S>* grad_of(int node) const {
        const auto& g = grads_[static_cast<size_t>(node)];
        return g.empty() ? nullptr : &g;
    }

    void backward(const TensorT<S>& loss);

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        const char* op;
        BackwardFn bw;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<S>> grads_;
};

template <typename S>
class TensorT {
public:
    TensorT() = default;

    static TensorT constant(std::vector<int> shape, std::vector<S> data) {
        require_sized(shape, data.size());
        TensorT t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<const std::vector<S>>(std::move(data));
        return t;
    }

    static TensorT zeros(std::vector<int> shape) {
        size_t n = static_cast<size_t>(shape_numel(shape));
        return constant(std::move(shape), std::vector<S>(n, S(0)));
    }

    static TensorT scalar_const(S v) { return constant({1}, {v}); }

    // Differentiable graph input; its gradient stays readable on the tape.
    static TensorT leaf(TapeT<S>& tape, std::vector<int> shape, std::vector<S> data) {
        TensorT t = constant(std::move(shape), std::move(data));
        t.tape_ = &tape;
        t.node_ = tape.add_node("leaf", nullptr);
        return t;
    }

    // Internal: op output constructor.
    static TensorT make(TapeT<S>* tape, std::vector<int> shape, std::vector<S> data,
                        const char* op, typename TapeT<S>::BackwardFn bw) {
        check_finite(op, data);
        TensorT t = constant(std::move(shape), std::move(data));
        if (tape) {
            t.tape_ = tape;
            t.node_ = tape->add_node(op, std::move(bw));
        }
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }
    // Copy on rvalues: values() chained off a temporary must not dangle.
    const std::vector<S>& values() const& { return *data_; }
    std::vector<S> values() const&& { return *data_; }
    std::shared_ptr<const std::vector<S>> data_ptr() const { return data_; }

    int rows() const { return shape_.at(0); }
    int cols() const { return shape_.at(1); }

    S scalar() const {
        if (numel() != 1) throw ContractError("scalar() on tensor of shape " + shape_str(shape_));
        return (*data_)[0];
    }

    bool on_tape() const { return tape_ != nullptr && node_ >= 0; }
    TapeT<S>* tape() const { return tape_; }
    int node() const { return node_; }

private:
    static void require_sized(const std::vector<int>& shape, size_t n) {
        if (shape_numel(shape) != static_cast<std::int64_t>(n)) {
            throw ShapeError("data length " + std::to_string(n) + " does not match shape " + shape_str(shape));
        }
    }

    std::vector<int> shape_;
    std::shared_ptr<const std::vector<S>> data_;
    TapeT<S>* tape_ = nullptr;
    int node_ = -1;
};

// Parameter entering the graph; backward accumulates into p.grad. With a null
// tape this is a constant view over the parameter buffer (inference path).
template <typename S>
TensorT<S> param_tensor(TapeT<S>* tape, ParamT<S>& p) {
    if (!tape) return TensorT<S>::constant(p.shape, p.value);
    ParamT<S>* pp = &p;
    return TensorT<S>::make(tape, p.shape, p.value, "param",
                            [pp](TapeT<S>&, const std::vector<S>& g) {
                                for (size_t i = 0; i < g.size(); ++i) pp->grad[i] += g[i];
                            });
}

template <typename S>
void TapeT<S>::backward(const TensorT<S>& loss) {
    if (!loss.on_tape() || loss.tape() != this) {
        throw ContractError("backward: loss is not on this graph");
    }
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    grad_accum(loss.node(), 1)[0] = S(1);
    for (int id = loss.node(); id >= 0; --id) {
        const auto& g = grads_[static_cast<size_t>(id)];
        if (g.empty()) continue;
        const Node& nd = nodes_[static_cast<size_t>(id)];
        for (size_t i = 0; i < g.size(); ++i) {
            if (!std::isfinite(g[i])) {
                throw NumericError(std::string(nd.op) + ": non-finite gradient at flat index " + std::to_string(i));
            }
        }
        if (nd.bw) nd.bw(*this, g);
    }
}

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
TapeT<S>* merge_tapes(std::initializer_list<const TensorT<S>*> ts) {
    TapeT<S>* tape = nullptr;
    for (const TensorT<S>* t : ts) {
        if (!t->on_tape()) continue;
        if (tape && tape != t->tape()) throw ContractError("op inputs belong to different graphs");
        tape = t->tape();
    }
    return tape;
}

template <typename S>
void require_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

template <typename S>
void accum(TapeT<S>& tp, int node, const S* src, size_t n) {
    auto& g = tp.grad_accum(node, n);
    for (size_t i = 0; i < n; ++i) g[i] += src[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape("add", a, b);
    TapeT<S>* tape = detail::merge_tapes<S>({&a, &b});
    std::vector<S> out = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int an = a.on_tape() ? a.node() : -1;
        const int bn = b.on_tape() ? b.node() : -1;
        bw = [an, bn](TapeT<S>& tp, const std::vector<S>& g) {
            if (an >= 0) detail::accum(tp, an, g.data(), g.size());
            if (bn >= 0) detail::accum(tp, bn, g.data(), g.size());
        };
    }
    return TensorT<S>::make(tape, a.shape(), std::move(out), "add", std::move(bw));
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape("mul", a, b);
    TapeT<S>* tape = detail::merge_tapes<S>({&a, &b});
    std::vector<S> out(a.values().size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int an = a.on_tape() ? a.node() : -1;
        const int bn = b.on_tape() ? b.node() : -1;
        auto ad = a.data_ptr();
        auto bd = b.data_ptr();
        bw = [an, bn, ad, bd](TapeT<S>& tp, const std::vector<S>& g) {
            const size_t n = g.size();
            if (an >= 0) {
                auto& ga = tp.grad_accum(an, n);
                for (size_t i = 0; i < n; ++i) ga[i] += g[i] * (*bd)[i];
            }
            if (bn >= 0) {
                auto& gb = tp.grad_accum(bn, n);
                for (size_t i = 0; i < n; ++i) gb[i] += g[i] * (*ad)[i];
            }
        };
    }
    return TensorT<S>::make(tape, a.shape(), std::move(out), "mul", std::move(bw));
}

template <typename S>
TensorT<S> scale(const TensorT<S>& x, S c) {
    TapeT<S>* tape = detail::merge_tapes<S>({&x});
    std::vector<S> out = x.values();
    for (auto& v : out) v *= c;
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int xn = x.node();
        bw = [xn, c](TapeT<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad_accum(xn, g.size());
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        };
    }
    return TensorT<S>::make(tape, x.shape(), std::move(out), "scale", std::move(bw));
}

// x[T x D] + v[D], broadcast over rows.
template <typename S>
TensorT<S> add_rowvec(const TensorT<S>& x, const TensorT<S>& v) {
    if (x.ndim() != 2 || v.numel() != x.cols()) {
        throw ShapeError("add_rowvec: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    }
    TapeT<S>* tape = detail::merge_tapes<S>({&x, &v});
    const int T = x.rows(), D = x.cols();
    std::vector<S> out = x.values();
    const auto& vv = v.values();
    for (int t = 0; t < T; ++t)
        for (int d = 0; d < D; ++d) out[static_cast<size_t>(t) * D + d] += vv[static_cast<size_t>(d)];
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int xn = x.on_tape() ? x.node() : -1;
        const int vn = v.on_tape() ? v.node() : -1;
        bw = [xn, vn, T, D](TapeT<S>& tp, const std::vector<S>& g) {
            if (xn >= 0) detail::accum(tp, xn, g.data(), g.size());
            if (vn >= 0) {
                auto& gv = tp.grad_accum(vn, static_cast<size_t>(D));
                for (int t = 0; t < T; ++t)
                    for (int d = 0; d < D; ++d) gv[static_cast<size_t>(d)] += g[static_cast<size_t>(t) * D + d];
            }
        };
    }
    return TensorT<S>::make(tape, x.shape(), std::move(out), "add_rowvec", std::move(bw));
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

// c[MxN] += a[MxK] * b[KxN]
template <typename S>
void gemm_acc(const S* a, const S* b, S* c, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const S* arow = a + static_cast<size_t>(i) * K;
        S* crow = c + static_cast<size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const S av = arow[k];
            if (av == S(0)) continue;
            const S* brow = b + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[MxN] += a[MxK] * b[NxK]^T
template <typename S>
void gemm_nt_acc(const S* a, const S* b, S* c, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const S* arow = a + static_cast<size_t>(i) * K;
        S* crow = c + static_cast<size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const S* brow = b + static_cast<size_t>(j) * K;
            S acc = S(0);
            for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[j] += acc;
        }
    }
}

// c[KxN] += a[MxK]^T * b[MxN]
template <typename S>
void gemm_tn_acc(const S* a, const S* b, S* c, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const S* arow = a + static_cast<size_t>(i) * K;
        const S* brow = b + static_cast<size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const S av = arow[k];
            if (av == S(0)) continue;
            S* crow = c + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace detail

// a[MxK] * b[KxN] -> [MxN]
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions do not match, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
    TapeT<S>* tape = detail::merge_tapes<S>({&a, &b});
    const int M = a.rows(), K = a.cols(), N = b.cols();
    std::vector<S> out(static_cast<size_t>(M) * N, S(0));
    detail::gemm_acc(a.values().data(), b.values().data(), out.data(), M, K, N);
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int an = a.on_tape() ? a.node() : -1;
        const int bn = b.on_tape() ? b.node() : -1;
        auto ad = a.data_ptr();
        auto bd = b.data_ptr();
        bw = [an, bn, ad, bd, M, K, N](TapeT<S>& tp, const std::vector<S>& g) {
            if (an >= 0) {
                auto& ga = tp.grad_accum(an, static_cast<size_t>(M) * K);
                detail::gemm_nt_acc(g.data(), bd->data(), ga.data(), M, N, K); // G[MxN]*B[KxN]^T
            }
            if (bn >= 0) {
                auto& gb = tp.grad_accum(bn, static_cast<size_t>(K) * N);
                detail::gemm_tn_acc(ad->data(), g.data(), gb.data(), M, K, N); // A^T*G
            }
        };
    }
    return TensorT<S>::make(tape, {M, N}, std::move(out), "matmul", std::move(bw));
}

// a[MxK] * b[NxK]^T -> [MxN]
template <typename S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: inner dimensions do not match, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
    TapeT<S>* tape = detail::merge_tapes<S>({&a, &b});
    const int M = a.rows(), K = a.cols(), N = b.rows();
    std::vector<S> out(static_cast<size_t>(M) * N, S(0));
    detail::gemm_nt_acc(a.values().data(), b.values().data(), out.data(), M, K, N);
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int an = a.on_tape() ? a.node() : -1;
        const int bn = b.on_tape() ? b.node() : -1;
        auto ad = a.data_ptr();
        auto bd = b.data_ptr();
        bw = [an, bn, ad, bd, M, K, N](TapeT<S>& tp, const std::vector<S>& g) {
            if (an >= 0) {
                auto& ga = tp.grad_accum(an, static_cast<size_t>(M) * K);
                detail::gemm_acc(g.data(), bd->data(), ga.data(), M, N, K); // G[MxN]*B[NxK]
            }
            if (bn >= 0) {
                auto& gb = tp.grad_accum(bn, static_cast<size_t>(N) * K);
                detail::gemm_tn_acc(g.data(), ad->data(), gb.data(), M, N, K); // G^T*A
            }
        };
    }
    return TensorT<S>::make(tape, {M, N}, std::move(out), "matmul_nt", std::move(bw));
}

// x[TxDin] * w[DinxDout] (+ b[Dout])
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* b = nullptr) {
    TensorT<S> out = matmul(x, w);
    if (b) out = add_rowvec(out, *b);
    return out;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// Row softmax with per-row max subtraction. `allow`, when given, is an MxN
// mask; disallowed entries get probability 0 and all-disallowed rows yield an
// all-zero row instead of NaN.
template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& x, const Mask* allow = nullptr) {
    if (x.ndim() != 2) throw ShapeError("softmax_rows: need 2-d input, got " + shape_str(x.shape()));
    const int M = x.rows(), N = x.cols();
    if (allow && static_cast<int>(allow->size()) != M * N) {
        throw ShapeError("softmax_rows: mask size " + std::to_string(allow->size()) +
                         " does not match " + shape_str(x.shape()));
    }
    TapeT<S>* tape = detail::merge_tapes<S>({&x});
    std::vector<S> out(static_cast<size_t>(M) * N, S(0));
    const auto& xv = x.values();
    for (int i = 0; i < M; ++i) {
        const size_t off = static_cast<size_t>(i) * N;
        S m = -std::numeric_limits<S>::infinity();
        for (int j = 0; j < N; ++j) {
            if (allow && !(*allow)[off + j]) continue;
            m = std::max(m, xv[off + j]);
        }
        if (!std::isfinite(m)) continue; // fully masked row -> zeros
        S z = S(0);
        for (int j = 0; j < N; ++j) {
            if (allow && !(*allow)[off + j]) continue;
            out[off + j] = std::exp(xv[off + j] - m);
            z += out[off + j];
        }
        for (int j = 0; j < N; ++j) out[off + j] /= z;
    }
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int xn = x.node();
        auto yv = std::make_shared<const std::vector<S>>(out);
        bw = [xn, yv, M, N](TapeT<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad_accum(xn, g.size());
            for (int i = 0; i < M; ++i) {
                const size_t off = static_cast<size_t>(i) * N;
                S dot = S(0);
                for (int j = 0; j < N; ++j) dot += g[off + j] * (*yv)[off + j];
                for (int j = 0; j < N; ++j) gx[off + j] += (*yv)[off + j] * (g[off + j] - dot);
            }
        };
    }
    return TensorT<S>::make(tape, {M, N}, std::move(out), "softmax_rows", std::move(bw));
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

namespace detail {

template <typename S, typename FwdF, typename BwdF>
TensorT<S> unary(const char* op, const TensorT<S>& x, FwdF f, BwdF dfdx) {
    TapeT<S>* tape = merge_tapes<S>({&x});
    std::vector<S> out(x.values().size());
    const auto& xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int xn = x.node();
        auto xd = x.data_ptr();
        bw = [xn, xd, dfdx](TapeT<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad_accum(xn, g.size());
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx((*xd)[i]);
        };
    }
    return TensorT<S>::make(tape, x.shape(), std::move(out), op, std::move(bw));
}

template <typename S>
S stable_sigmoid(S z) {
    if (z >= S(0)) return S(1) / (S(1) + std::exp(-z));
    const S e = std::exp(z);
    return e / (S(1) + e);
}

template <typename S>
S softplus(S z) {
    return std::max(z, S(0)) + std::log1p(std::exp(-std::abs(z)));
}

} // namespace detail

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
    return detail::unary<S>("relu", x,
        [](S v) { return v > S(0) ? v : S(0); },
        [](S v) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
TensorT<S> leaky_relu(const TensorT<S>& x, S slope) {
    return detail::unary<S>("leaky_relu", x,
        [slope](S v) { return v > S(0) ? v : slope * v; },
        [slope](S v) { return v > S(0) ? S(1) : slope; });
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
    return detail::unary<S>("sigmoid", x,
        [](S v) { return detail::stable_sigmoid(v); },
        [](S v) {
            const S s = detail::stable_sigmoid(v);
            return s * (S(1) - s);
        });
}

template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary<S>("gelu", x,
        [](S v) {
            return S(0.5) * v * (S(1) + static_cast<S>(std::erf(static_cast<double>(v) * inv_sqrt2)));
        },
        [](S v) {
            const double vd = static_cast<double>(v);
            const double cdf = 0.5 * (1.0 + std::erf(vd * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * vd * vd);
            return static_cast<S>(cdf + vd * pdf);
        });
}

// PReLU with a single learnable slope (tensor of one element).
template <typename S>
TensorT<S> prelu(const TensorT<S>& x, const TensorT<S>& slope) {
    if (slope.numel() != 1) throw ShapeError("prelu: slope must be scalar, got " + shape_str(slope.shape()));
    TapeT<S>* tape = detail::merge_tapes<S>({&x, &slope});
    const S a = slope.values()[0];
    std::vector<S> out(x.values().size());
    const auto& xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > S(0) ? xv[i] : a * xv[i];
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int xn = x.on_tape() ? x.node() : -1;
        const int an = slope.on_tape() ? slope.node() : -1;
        auto xd = x.data_ptr();
        bw = [xn, an, xd, a](TapeT<S>& tp, const std::vector<S>& g) {
            if (xn >= 0) {
                auto& gx = tp.grad_accum(xn, g.size());
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * ((*xd)[i] > S(0) ? S(1) : a);
            }
            if (an >= 0) {
                auto& ga = tp.grad_accum(an, 1);
                S acc = S(0);
                for (size_t i = 0; i < g.size(); ++i)
                    if ((*xd)[i] <= S(0)) acc += g[i] * (*xd)[i];
                ga[0] += acc;
            }
        };
    }
    return TensorT<S>::make(tape, x.shape(), std::move(out), "prelu", std::move(bw));
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Per-row zero-mean unit-variance over the last dim, then affine.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias) {
    if (x.ndim() != 2) throw ShapeError("layer_norm: need 2-d input, got " + shape_str(x.shape()));
    const int T = x.rows(), D = x.cols();
    if (gain.numel() != D || bias.numel() != D) {
        throw ShapeError("layer_norm: affine params " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match row width " + std::to_string(D));
    }
    constexpr double eps = 1e-5;
    TapeT<S>* tape = detail::merge_tapes<S>({&x, &gain, &bias});
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    std::vector<S> out(static_cast<size_t>(T) * D);
    auto xhat = std::make_shared<std::vector<S>>(static_cast<size_t>(T) * D);
    auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        const size_t off = static_cast<size_t>(t) * D;
        S mean = S(0);
        for (int d = 0; d < D; ++d) mean += xv[off + d];
        mean /= S(D);
        S var = S(0);
        for (int d = 0; d < D; ++d) {
            const S c = xv[off + d] - mean;
            var += c * c;
        }
        var /= S(D);
        const S istd = S(1) / static_cast<S>(std::sqrt(static_cast<double>(var) + eps));
        (*inv_std)[static_cast<size_t>(t)] = istd;
        for (int d = 0; d < D; ++d) {
            (*xhat)[off + d] = (xv[off + d] - mean) * istd;
            out[off + d] = gv[static_cast<size_t>(d)] * (*xhat)[off + d] + bv[static_cast<size_t>(d)];
        }
    }
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int xn = x.on_tape() ? x.node() : -1;
        const int gn = gain.on_tape() ? gain.node() : -1;
        const int bn = bias.on_tape() ? bias.node() : -1;
        auto gd = gain.data_ptr();
        bw = [xn, gn, bn, gd, xhat, inv_std, T, D](TapeT<S>& tp, const std::vector<S>& g) {
            if (gn >= 0) {
                auto& gg = tp.grad_accum(gn, static_cast<size_t>(D));
                for (int t = 0; t < T; ++t)
                    for (int d = 0; d < D; ++d)
                        gg[static_cast<size_t>(d)] += g[static_cast<size_t>(t) * D + d] * (*xhat)[static_cast<size_t>(t) * D + d];
            }
            if (bn >= 0) {
                auto& gb = tp.grad_accum(bn, static_cast<size_t>(D));
                for (int t = 0; t < T; ++t)
                    for (int d = 0; d < D; ++d) gb[static_cast<size_t>(d)] += g[static_cast<size_t>(t) * D + d];
            }
            if (xn >= 0) {
                auto& gx = tp.grad_accum(xn, static_cast<size_t>(T) * D);
                for (int t = 0; t < T; ++t) {
                    const size_t off = static_cast<size_t>(t) * D;
                    S mean_h = S(0), mean_hx = S(0);
                    for (int d = 0; d < D; ++d) {
                        const S h = (*gd)[static_cast<size_t>(d)] * g[off + d];
                        mean_h += h;
                        mean_hx += h * (*xhat)[off + d];
                    }
                    mean_h /= S(D);
                    mean_hx /= S(D);
                    const S istd = (*inv_std)[static_cast<size_t>(t)];
                    for (int d = 0; d < D; ++d) {
                        const S h = (*gd)[static_cast<size_t>(d)] * g[off + d];
                        gx[off + d] += (h - mean_h - (*xhat)[off + d] * mean_hx) * istd;
                    }
                }
            }
        };
    }
    return TensorT<S>::make(tape, {T, D}, std::move(out), "layer_norm", std::move(bw));
}

// ---------------------------------------------------------------------------
// 1D convolution
// ---------------------------------------------------------------------------

enum class Padding { Same, Valid };

// x[TxCin], kernel[KxCinxCout] flat as ((k*Cin)+ci)*Cout+co.
template <typename S>
TensorT<S> conv1d(const TensorT<S>& x, const TensorT<S>& kernel, int stride, Padding padding,
                  const TensorT<S>* bias = nullptr) {
    if (x.ndim() != 2 || kernel.ndim() != 3) {
        throw ShapeError("conv1d: need x[TxCin], kernel[KxCinxCout], got " + shape_str(x.shape()) +
                         " and " + shape_str(kernel.shape()));
    }
    const int T = x.rows(), cin = x.cols();
    const int K = kernel.dim(0), kcin = kernel.dim(1), cout = kernel.dim(2);
    if (kcin != cin) {
        throw ShapeError("conv1d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(kernel.shape()));
    }
    if (stride < 1) throw ConfigError("conv1d: stride must be positive");
    if (padding == Padding::Same && K % 2 == 0) {
        throw ConfigError("conv1d: same padding requires odd kernel size, got " + std::to_string(K));
    }
    if (padding == Padding::Valid && T < K) {
        throw ShapeError("conv1d: input length " + std::to_string(T) + " shorter than kernel " + std::to_string(K));
    }
    const int pad = padding == Padding::Same ? (K - 1) / 2 : 0;
    const int Tout = padding == Padding::Same ? (T + stride - 1) / stride : (T - K) / stride + 1;
    if (bias && bias->numel() != cout) {
        throw ShapeError("conv1d: bias " + shape_str(bias->shape()) + " does not match Cout " + std::to_string(cout));
    }
    TapeT<S>* tape = bias ? detail::merge_tapes<S>({&x, &kernel, bias})
                          : detail::merge_tapes<S>({&x, &kernel});
    const auto& xv = x.values();
    const auto& wv = kernel.values();
    std::vector<S> out(static_cast<size_t>(Tout) * cout, S(0));
    for (int to = 0; to < Tout; ++to) {
        S* orow = out.data() + static_cast<size_t>(to) * cout;
        if (bias) {
            const auto& bvv = bias->values();
            for (int co = 0; co < cout; ++co) orow[co] = bvv[static_cast<size_t>(co)];
        }
        for (int k = 0; k < K; ++k) {
            const int u = to * stride + k - pad;
            if (u < 0 || u >= T) continue;
            const S* xrow = xv.data() + static_cast<size_t>(u) * cin;
            const S* wk = wv.data() + static_cast<size_t>(k) * cin * cout;
            for (int ci = 0; ci < cin; ++ci) {
                const S xval = xrow[ci];
                if (xval == S(0)) continue;
                const S* wrow = wk + static_cast<size_t>(ci) * cout;
                for (int co = 0; co < cout; ++co) orow[co] += xval * wrow[co];
            }
        }
    }
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int xn = x.on_tape() ? x.node() : -1;
        const int wn = kernel.on_tape() ? kernel.node() : -1;
        const int bn = (bias && bias->on_tape()) ? bias->node() : -1;
        auto xd = x.data_ptr();
        auto wd = kernel.data_ptr();
        bw = [xn, wn, bn, xd, wd, T, cin, K, cout, Tout, stride, pad](TapeT<S>& tp, const std::vector<S>& g) {
            std::vector<S>* gx = xn >= 0 ? &tp.grad_accum(xn, static_cast<size_t>(T) * cin) : nullptr;
            std::vector<S>* gw = wn >= 0 ? &tp.grad_accum(wn, static_cast<size_t>(K) * cin * cout) : nullptr;
            if (bn >= 0) {
                auto& gb = tp.grad_accum(bn, static_cast<size_t>(cout));
                for (int to = 0; to < Tout; ++to)
                    for (int co = 0; co < cout; ++co) gb[static_cast<size_t>(co)] += g[static_cast<size_t>(to) * cout + co];
            }
            if (!gx && !gw) return;
            for (int to = 0; to < Tout; ++to) {
                const S* grow = g.data() + static_cast<size_t>(to) * cout;
                for (int k = 0; k < K; ++k) {
                    const int u = to * stride + k - pad;
                    if (u < 0 || u >= T) continue;
                    const S* xrow = xd->data() + static_cast<size_t>(u) * cin;
                    const S* wk = wd->data() + static_cast<size_t>(k) * cin * cout;
                    for (int ci = 0; ci < cin; ++ci) {
                        const S* wrow = wk + static_cast<size_t>(ci) * cout;
                        if (gx) {
                            S acc = S(0);
                            for (int co = 0; co < cout; ++co) acc += grow[co] * wrow[co];
                            (*gx)[static_cast<size_t>(u) * cin + ci] += acc;
                        }
                        if (gw) {
                            S* gwrow = gw->data() + (static_cast<size_t>(k) * cin + ci) * cout;
                            const S xval = xrow[ci];
                            for (int co = 0; co < cout; ++co) gwrow[co] += xval * grow[co];
                        }
                    }
                }
            }
        };
    }
    return TensorT<S>::make(tape, {Tout, cout}, std::move(out), "conv1d", std::move(bw));
}

// Depthwise temporal convolution, x[TxC], kernel[KxC], same padding.
template <typename S>
TensorT<S> depthwise_conv1d(const TensorT<S>& x, const TensorT<S>& kernel, int stride) {
    if (x.ndim() != 2 || kernel.ndim() != 2 || kernel.cols() != x.cols()) {
        throw ShapeError("depthwise_conv1d: shape mismatch " + shape_str(x.shape()) +
                         " vs " + shape_str(kernel.shape()));
    }
    const int T = x.rows(), C = x.cols(), K = kernel.rows();
    if (K % 2 == 0) throw ConfigError("depthwise_conv1d: kernel size must be odd");
    const int pad = (K - 1) / 2;
    const int Tout = (T + stride - 1) / stride;
    TapeT<S>* tape = detail::merge_tapes<S>({&x, &kernel});
    const auto& xv = x.values();
    const auto& wv = kernel.values();
    std::vector<S> out(static_cast<size_t>(Tout) * C, S(0));
    for (int to = 0; to < Tout; ++to) {
        S* orow = out.data() + static_cast<size_t>(to) * C;
        for (int k = 0; k < K; ++k) {
            const int u = to * stride + k - pad;
            if (u < 0 || u >= T) continue;
            const S* xrow = xv.data() + static_cast<size_t>(u) * C;
            const S* wrow = wv.data() + static_cast<size_t>(k) * C;
            for (int c = 0; c < C; ++c) orow[c] += xrow[c] * wrow[c];
        }
    }
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int xn = x.on_tape() ? x.node() : -1;
        const int wn = kernel.on_tape() ? kernel.node() : -1;
        auto xd = x.data_ptr();
        auto wd = kernel.data_ptr();
        bw = [xn, wn, xd, wd, T, C, K, Tout, stride, pad](TapeT<S>& tp, const std::vector<S>& g) {
            std::vector<S>* gx = xn >= 0 ? &tp.grad_accum(xn, static_cast<size_t>(T) * C) : nullptr;
            std::vector<S>* gw = wn >= 0 ? &tp.grad_accum(wn, static_cast<size_t>(K) * C) : nullptr;
            for (int to = 0; to < Tout; ++to) {
                const S* grow = g.data() + static_cast<size_t>(to) * C;
                for (int k = 0; k < K; ++k) {
                    const int u = to * stride + k - pad;
                    if (u < 0 || u >= T) continue;
                    if (gx) {
                        S* gxrow = gx->data() + static_cast<size_t>(u) * C;
                        const S* wrow = wd->data() + static_cast<size_t>(k) * C;
                        for (int c = 0; c < C; ++c) gxrow[c] += grow[c] * wrow[c];
                    }
                    if (gw) {
                        S* gwrow = gw->data() + static_cast<size_t>(k) * C;
                        const S* xrow = xd->data() + static_cast<size_t>(u) * C;
                        for (int c = 0; c < C; ++c) gwrow[c] += grow[c] * xrow[c];
                    }
                }
            }
        };
    }
    return TensorT<S>::make(tape, {Tout, C}, std::move(out), "depthwise_conv1d", std::move(bw));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& x, int c0, int c1) {
    if (x.ndim() != 2 || c0 < 0 || c1 > x.cols() || c0 >= c1) {
        throw ShapeError("slice_cols: invalid range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") for " + shape_str(x.shape()));
    }
    const int T = x.rows(), D = x.cols(), W = c1 - c0;
    TapeT<S>* tape = detail::merge_tapes<S>({&x});
    const auto& xv = x.values();
    std::vector<S> out(static_cast<size_t>(T) * W);
    for (int t = 0; t < T; ++t)
        for (int c = 0; c < W; ++c) out[static_cast<size_t>(t) * W + c] = xv[static_cast<size_t>(t) * D + c0 + c];
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int xn = x.node();
        bw = [xn, T, D, W, c0](TapeT<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad_accum(xn, static_cast<size_t>(T) * D);
            for (int t = 0; t < T; ++t)
                for (int c = 0; c < W; ++c) gx[static_cast<size_t>(t) * D + c0 + c] += g[static_cast<size_t>(t) * W + c];
        };
    }
    return TensorT<S>::make(tape, {T, W}, std::move(out), "slice_cols", std::move(bw));
}

template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input");
    const int T = parts[0].rows();
    int W = 0;
    TapeT<S>* tape = nullptr;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.rows() != T) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        }
        W += p.cols();
        if (p.on_tape()) {
            if (tape && tape != p.tape()) throw ContractError("concat_cols: inputs on different graphs");
            tape = p.tape();
        }
    }
    std::vector<S> out(static_cast<size_t>(T) * W);
    std::vector<int> offsets, widths, nodes;
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.cols();
        const auto& pv = p.values();
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < w; ++c) out[static_cast<size_t>(t) * W + off + c] = pv[static_cast<size_t>(t) * w + c];
        offsets.push_back(off);
        widths.push_back(w);
        nodes.push_back(p.on_tape() ? p.node() : -1);
        off += w;
    }
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        bw = [offsets, widths, nodes, T, W](TapeT<S>& tp, const std::vector<S>& g) {
            for (size_t i = 0; i < nodes.size(); ++i) {
                if (nodes[i] < 0) continue;
                const int w = widths[i], o = offsets[i];
                auto& gp = tp.grad_accum(nodes[i], static_cast<size_t>(T) * w);
                for (int t = 0; t < T; ++t)
                    for (int c = 0; c < w; ++c) gp[static_cast<size_t>(t) * w + c] += g[static_cast<size_t>(t) * W + o + c];
            }
        };
    }
    return TensorT<S>::make(tape, {T, W}, std::move(out), "concat_cols", std::move(bw));
}

template <typename S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty input");
    const int D = parts[0].cols();
    int T = 0;
    TapeT<S>* tape = nullptr;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.cols() != D) {
            throw ShapeError("concat_rows: col mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        }
        T += p.rows();
        if (p.on_tape()) {
            if (tape && tape != p.tape()) throw ContractError("concat_rows: inputs on different graphs");
            tape = p.tape();
        }
    }
    std::vector<S> out;
    out.reserve(static_cast<size_t>(T) * D);
    std::vector<int> row_offsets, row_counts, nodes;
    int roff = 0;
    for (const auto& p : parts) {
        out.insert(out.end(), p.values().begin(), p.values().end());
        row_offsets.push_back(roff);
        row_counts.push_back(p.rows());
        nodes.push_back(p.on_tape() ? p.node() : -1);
        roff += p.rows();
    }
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        bw = [row_offsets, row_counts, nodes, D](TapeT<S>& tp, const std::vector<S>& g) {
            for (size_t i = 0; i < nodes.size(); ++i) {
                if (nodes[i] < 0) continue;
                const size_t n = static_cast<size_t>(row_counts[i]) * D;
                auto& gp = tp.grad_accum(nodes[i], n);
                const S* src = g.data() + static_cast<size_t>(row_offsets[i]) * D;
                for (size_t j = 0; j < n; ++j) gp[j] += src[j];
            }
        };
    }
    return TensorT<S>::make(tape, {T, D}, std::move(out), "concat_rows", std::move(bw));
}

// Zeroes rows where mask is false; gradients of masked rows vanish.
template <typename S>
TensorT<S> apply_row_mask(const TensorT<S>& x, const Mask& valid) {
    if (x.ndim() != 2 || static_cast<int>(valid.size()) != x.rows()) {
        throw ShapeError("apply_row_mask: mask length " + std::to_string(valid.size()) +
                         " does not match " + shape_str(x.shape()));
    }
    const int T = x.rows(), D = x.cols();
    TapeT<S>* tape = detail::merge_tapes<S>({&x});
    std::vector<S> out = x.values();
    for (int t = 0; t < T; ++t) {
        if (valid[static_cast<size_t>(t)]) continue;
        std::fill_n(out.begin() + static_cast<size_t>(t) * D, D, S(0));
    }
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int xn = x.node();
        auto m = std::make_shared<const Mask>(valid);
        bw = [xn, m, T, D](TapeT<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad_accum(xn, g.size());
            for (int t = 0; t < T; ++t) {
                if (!(*m)[static_cast<size_t>(t)]) continue;
                for (int d = 0; d < D; ++d) gx[static_cast<size_t>(t) * D + d] += g[static_cast<size_t>(t) * D + d];
            }
        };
    }
    return TensorT<S>::make(tape, x.shape(), std::move(out), "apply_row_mask", std::move(bw));
}

// Mean over valid rows -> [D].
template <typename S>
TensorT<S> mean_rows_masked(const TensorT<S>& x, const Mask& valid) {
    if (x.ndim() != 2 || static_cast<int>(valid.size()) != x.rows()) {
        throw ShapeError("mean_rows_masked: mask length " + std::to_string(valid.size()) +
                         " does not match " + shape_str(x.shape()));
    }
    const int T = x.rows(), D = x.cols();
    int nvalid = 0;
    for (auto v : valid) nvalid += v ? 1 : 0;
    if (nvalid == 0) throw ContractError("mean_rows_masked: no valid rows");
    TapeT<S>* tape = detail::merge_tapes<S>({&x});
    const auto& xv = x.values();
    std::vector<S> out(static_cast<size_t>(D), S(0));
    for (int t = 0; t < T; ++t) {
        if (!valid[static_cast<size_t>(t)]) continue;
        for (int d = 0; d < D; ++d) out[static_cast<size_t>(d)] += xv[static_cast<size_t>(t) * D + d];
    }
    for (auto& v : out) v /= S(nvalid);
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int xn = x.node();
        auto m = std::make_shared<const Mask>(valid);
        bw = [xn, m, T, D, nvalid](TapeT<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad_accum(xn, static_cast<size_t>(T) * D);
            for (int t = 0; t < T; ++t) {
                if (!(*m)[static_cast<size_t>(t)]) continue;
                for (int d = 0; d < D; ++d) gx[static_cast<size_t>(t) * D + d] += g[static_cast<size_t>(d)] / S(nvalid);
            }
        };
    }
    return TensorT<S>::make(tape, {D}, std::move(out), "mean_rows_masked", std::move(bw));
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
    TapeT<S>* tape = detail::merge_tapes<S>({&x});
    S acc = S(0);
    for (S v : x.values()) acc += v;
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int xn = x.node();
        const size_t n = x.values().size();
        bw = [xn, n](TapeT<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad_accum(xn, n);
            for (size_t i = 0; i < n; ++i) gx[i] += g[0];
        };
    }
    return TensorT<S>::make(tape, {1}, {acc}, "sum_all", std::move(bw));
}

// ---------------------------------------------------------------------------
// Gating
// ---------------------------------------------------------------------------

enum class GateMode {
    HardST, // one-hot forward, soft-softmax gradient (training)
    Soft,   // soft relaxation forward and backward (gradient checking)
    Argmax  // plain argmax on logits, no noise (inference)
};

// Gumbel-Softmax gate over n logits. `noise` holds pre-sampled Gumbel(0,1)
// values (ignored for Argmax). Ties break to the lowest index.
template <typename S>
TensorT<S> gumbel_gate(const TensorT<S>& logits, const std::vector<S>& noise, S tau, GateMode mode) {
    if (logits.ndim() != 1) throw ShapeError("gumbel_gate: logits must be 1-d, got " + shape_str(logits.shape()));
    if (tau <= S(0)) throw ConfigError("gumbel_gate: temperature must be positive");
    const int n = logits.dim(0);
    const auto& lv = logits.values();
    std::vector<S> y(static_cast<size_t>(n), S(0));
    if (mode == GateMode::Argmax) {
        int best = 0;
        for (int j = 1; j < n; ++j)
            if (lv[static_cast<size_t>(j)] > lv[static_cast<size_t>(best)]) best = j;
        y[static_cast<size_t>(best)] = S(1);
        return TensorT<S>::constant({n}, std::move(y));
    }
    if (static_cast<int>(noise.size()) != n) {
        throw ShapeError("gumbel_gate: noise length " + std::to_string(noise.size()) +
                         " does not match logits " + shape_str(logits.shape()));
    }
    // softmax((logits + g)/tau) with max subtraction
    std::vector<S> soft(static_cast<size_t>(n));
    S m = -std::numeric_limits<S>::infinity();
    int best = 0;
    for (int j = 0; j < n; ++j) {
        soft[static_cast<size_t>(j)] = (lv[static_cast<size_t>(j)] + noise[static_cast<size_t>(j)]) / tau;
        if (soft[static_cast<size_t>(j)] > soft[static_cast<size_t>(best)]) best = j;
        m = std::max(m, soft[static_cast<size_t>(j)]);
    }
    S z = S(0);
    for (int j = 0; j < n; ++j) {
        soft[static_cast<size_t>(j)] = std::exp(soft[static_cast<size_t>(j)] - m);
        z += soft[static_cast<size_t>(j)];
    }
    for (auto& v : soft) v /= z;
    if (mode == GateMode::HardST) {
        y[static_cast<size_t>(best)] = S(1);
    } else {
        y = soft;
    }
    TapeT<S>* tape = detail::merge_tapes<S>({&logits});
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int ln = logits.node();
        auto sp = std::make_shared<const std::vector<S>>(std::move(soft));
        bw = [ln, sp, tau, n](TapeT<S>& tp, const std::vector<S>& g) {
            auto& gl = tp.grad_accum(ln, static_cast<size_t>(n));
            S dot = S(0);
            for (int j = 0; j < n; ++j) dot += g[static_cast<size_t>(j)] * (*sp)[static_cast<size_t>(j)];
            for (int j = 0; j < n; ++j)
                gl[static_cast<size_t>(j)] += (*sp)[static_cast<size_t>(j)] * (g[static_cast<size_t>(j)] - dot) / tau;
        };
    }
    return TensorT<S>::make(tape, {n}, std::move(y), "gumbel_gate", std::move(bw));
}

// out = sum_j w[j] * parts[j]; zero-weight parts are skipped in the forward so
// a one-hot mix is bit-identical to the selected part.
template <typename S>
TensorT<S> weighted_mix(const TensorT<S>& w, const std::vector<TensorT<S>>& parts) {
    if (w.ndim() != 1 || static_cast<size_t>(w.dim(0)) != parts.size()) {
        throw ShapeError("weighted_mix: weight length " + shape_str(w.shape()) + " does not match " +
                         std::to_string(parts.size()) + " parts");
    }
    if (parts.empty()) throw ContractError("weighted_mix: empty parts");
    for (const auto& p : parts) detail::require_same_shape("weighted_mix", parts[0], p);
    TapeT<S>* tape = detail::merge_tapes<S>({&w, &parts[0]});
    for (const auto& p : parts) {
        if (p.on_tape()) {
            if (tape && tape != p.tape()) throw ContractError("weighted_mix: inputs on different graphs");
            tape = p.tape();
        }
    }
    const size_t n = parts[0].values().size();
    const auto& wv = w.values();
    std::vector<S> out(n, S(0));
    for (size_t j = 0; j < parts.size(); ++j) {
        const S wj = wv[j];
        if (wj == S(0)) continue;
        const auto& pv = parts[j].values();
        if (wj == S(1)) {
            for (size_t i = 0; i < n; ++i) out[i] += pv[i];
        } else {
            for (size_t i = 0; i < n; ++i) out[i] += wj * pv[i];
        }
    }
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int wn = w.on_tape() ? w.node() : -1;
        std::vector<int> pnodes;
        std::vector<std::shared_ptr<const std::vector<S>>> pdata;
        for (const auto& p : parts) {
            pnodes.push_back(p.on_tape() ? p.node() : -1);
            pdata.push_back(p.data_ptr());
        }
        auto wd = w.data_ptr();
        bw = [wn, pnodes, pdata, wd, n](TapeT<S>& tp, const std::vector<S>& g) {
            if (wn >= 0) {
                auto& gw = tp.grad_accum(wn, pnodes.size());
                for (size_t j = 0; j < pnodes.size(); ++j) {
                    S acc = S(0);
                    const auto& pv = *pdata[j];
                    for (size_t i = 0; i < n; ++i) acc += g[i] * pv[i];
                    gw[j] += acc;
                }
            }
            for (size_t j = 0; j < pnodes.size(); ++j) {
                if (pnodes[j] < 0) continue;
                const S wj = (*wd)[j];
                if (wj == S(0)) continue;
                auto& gp = tp.grad_accum(pnodes[j], n);
                for (size_t i = 0; i < n; ++i) gp[i] += wj * g[i];
            }
        };
    }
    return TensorT<S>::make(tape, parts[0].shape(), std::move(out), "weighted_mix", std::move(bw));
}

// ---------------------------------------------------------------------------
// Fused losses
// ---------------------------------------------------------------------------

// Binary focal loss from logits, summed over valid rows x C and normalized by
// the number of positive cells (the cited method's convention; positives are
// rare on the detection grid and a plain mean starves them of gradient).
// `targets` is a 0/1 byte array matching the logits, `row_valid` flags rows
// that count.
template <typename S>
TensorT<S> focal_loss_from_logits(const TensorT<S>& logits, const std::vector<std::uint8_t>& targets,
                                  const Mask& row_valid, S alpha, S gamma) {
    if (logits.ndim() != 2) throw ShapeError("focal_loss: need 2-d logits, got " + shape_str(logits.shape()));
    const int M = logits.rows(), C = logits.cols();
    if (static_cast<int>(targets.size()) != M * C || static_cast<int>(row_valid.size()) != M) {
        throw ShapeError("focal_loss: target/mask sizes do not match logits " + shape_str(logits.shape()));
    }
    int nvalid = 0;
    std::int64_t npos = 0;
    for (int i = 0; i < M; ++i) {
        if (!row_valid[static_cast<size_t>(i)]) continue;
        ++nvalid;
        for (int c = 0; c < C; ++c) npos += targets[static_cast<size_t>(i) * C + c] ? 1 : 0;
    }
    if (nvalid == 0) return TensorT<S>::scalar_const(S(0));
    const S divisor = static_cast<S>(std::max<std::int64_t>(npos, 1));
    TapeT<S>* tape = detail::merge_tapes<S>({&logits});
    const auto& zv = logits.values();
    S total = S(0);
    for (int i = 0; i < M; ++i) {
        if (!row_valid[static_cast<size_t>(i)]) continue;
        for (int c = 0; c < C; ++c) {
            const size_t idx = static_cast<size_t>(i) * C + c;
            const S z = zv[idx];
            const S sp_pos = detail::softplus(-z); // -log p
            const S sp_neg = detail::softplus(z);  // -log(1-p)
            if (targets[idx]) {
                total += alpha * std::exp(-gamma * sp_neg) * sp_pos;
            } else {
                total += (S(1) - alpha) * std::exp(-gamma * sp_pos) * sp_neg;
            }
        }
    }
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int zn = logits.node();
        auto zd = logits.data_ptr();
        auto tgt = std::make_shared<const std::vector<std::uint8_t>>(targets);
        auto rv = std::make_shared<const Mask>(row_valid);
        bw = [zn, zd, tgt, rv, M, C, alpha, gamma, divisor](TapeT<S>& tp, const std::vector<S>& g) {
            auto& gz = tp.grad_accum(zn, static_cast<size_t>(M) * C);
            const S gscale = g[0] / divisor;
            for (int i = 0; i < M; ++i) {
                if (!(*rv)[static_cast<size_t>(i)]) continue;
                for (int c = 0; c < C; ++c) {
                    const size_t idx = static_cast<size_t>(i) * C + c;
                    const S z = (*zd)[idx];
                    const S p = detail::stable_sigmoid(z);
                    S d;
                    if ((*tgt)[idx]) {
                        const S sp_pos = detail::softplus(-z);
                        d = alpha * std::exp(-gamma * detail::softplus(z)) * ((p - S(1)) - gamma * p * sp_pos);
                    } else {
                        const S sp_neg = detail::softplus(z);
                        d = (S(1) - alpha) * std::exp(-gamma * detail::softplus(-z)) * (p + gamma * (S(1) - p) * sp_neg);
                    }
                    gz[idx] += gscale * d;
                }
            }
        };
    }
    return TensorT<S>::make(tape, {1}, {total / divisor}, "focal_loss", std::move(bw));
}

// One positive location for the interval regression loss.
struct RegTarget {
    int position;   // pyramid row
    int class_id;
    double stride;  // level stride in snippet units
    double center;  // position center time in snippet units
    double gt_start;
    double gt_end;
};

inline constexpr double kGiouEps = 1e-8;

// 1-D generalized-IoU loss, mean over positives. `reg` is [T_l x 2C] with
// channel layout (2*c, 2*c+1) = (start distance, end distance) in stride
// units. Empty positives -> constant 0.
template <typename S>
TensorT<S> giou_mean_loss(const TensorT<S>& reg, const std::vector<RegTarget>& positives) {
    if (reg.ndim() != 2 || reg.cols() % 2 != 0) {
        throw ShapeError("giou_mean_loss: need [T x 2C] regression tensor, got " + shape_str(reg.shape()));
    }
    if (positives.empty()) return TensorT<S>::scalar_const(S(0));
    constexpr double eps = kGiouEps;
    const int W = reg.cols();
    TapeT<S>* tape = detail::merge_tapes<S>({&reg});
    const auto& rv = reg.values();
    double total = 0;
    for (const auto& t : positives) {
        const size_t base = static_cast<size_t>(t.position) * W + 2 * t.class_id;
        const double ds = static_cast<double>(rv[base]);
        const double de = static_cast<double>(rv[base + 1]);
        const double s1 = t.center - ds * t.stride;
        const double e1 = t.center + de * t.stride;
        const double inter = std::max(0.0, std::min(e1, t.gt_end) - std::max(s1, t.gt_start));
        const double uni = std::max((e1 - s1) + (t.gt_end - t.gt_start) - inter, eps);
        const double hull = std::max(std::max(e1, t.gt_end) - std::min(s1, t.gt_start), eps);
        total += 2.0 - inter / uni - uni / hull;
    }
    const double n = static_cast<double>(positives.size());
    typename TapeT<S>::BackwardFn bw;
    if (tape) {
        const int rn = reg.node();
        auto rd = reg.data_ptr();
        auto pos = std::make_shared<const std::vector<RegTarget>>(positives);
        const size_t total_sz = rv.size();
        bw = [rn, rd, pos, W, n, total_sz](TapeT<S>& tp, const std::vector<S>& g) {
            auto& gr = tp.grad_accum(rn, total_sz);
            const double gscale = static_cast<double>(g[0]) / n;
            for (const auto& t : *pos) {
                const size_t base = static_cast<size_t>(t.position) * W + 2 * t.class_id;
                const double ds = static_cast<double>((*rd)[base]);
                const double de = static_cast<double>((*rd)[base + 1]);
                const double s1 = t.center - ds * t.stride;
                const double e1 = t.center + de * t.stride;
                const double s2 = t.gt_start, e2 = t.gt_end;
                const double inter_raw = std::min(e1, e2) - std::max(s1, s2);
                const double inter = std::max(0.0, inter_raw);
                const double uni = std::max((e1 - s1) + (e2 - s2) - inter, kGiouEps);
                const double hull = std::max(std::max(e1, e2) - std::min(s1, s2), kGiouEps);
                // piecewise derivatives of I, U, H wrt predicted endpoints
                const double dI_ds1 = (inter_raw > 0 && s1 > s2) ? -1.0 : 0.0;
                const double dI_de1 = (inter_raw > 0 && e1 < e2) ? 1.0 : 0.0;
                const double dU_ds1 = -1.0 - dI_ds1;
                const double dU_de1 = 1.0 - dI_de1;
                const double dH_ds1 = (s1 < s2) ? -1.0 : 0.0;
                const double dH_de1 = (e1 > e2) ? 1.0 : 0.0;
                // loss = 2 - I/U - U/H
                const double dL_ds1 = -(dI_ds1 * uni - inter * dU_ds1) / (uni * uni) -
                                      (dU_ds1 * hull - uni * dH_ds1) / (hull * hull);
                const double dL_de1 = -(dI_de1 * uni - inter * dU_de1) / (uni * uni) -
                                      (dU_de1 * hull - uni * dH_de1) / (hull * hull);
                gr[base] += static_cast<S>(gscale * dL_ds1 * (-t.stride));
                gr[base + 1] += static_cast<S>(gscale * dL_de1 * t.stride);
            }
        };
    }
    return TensorT<S>::make(tape, {1}, {static_cast<S>(total / n)}, "giou_loss", std::move(bw));
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Bias-corrected Adam with decoupled weight decay; zeroes grads afterward.
template <typename S>
void adam_step(const std::vector<ParamT<S>*>& params, const AdamConfig& cfg) {
    for (ParamT<S>* p : params) {
        p->step_count += 1;
        const double t = static_cast<double>(p->step_count);
        const double bc1 = 1.0 - std::pow(cfg.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg.beta2, t);
        for (size_t i = 0; i < p->value.size(); ++i) {
            const double g = static_cast<double>(p->grad[i]);
            const double m = cfg.beta1 * static_cast<double>(p->adam_m[i]) + (1.0 - cfg.beta1) * g;
            const double v = cfg.beta2 * static_cast<double>(p->adam_v[i]) + (1.0 - cfg.beta2) * g * g;
            p->adam_m[i] = static_cast<S>(m);
            p->adam_v[i] = static_cast<S>(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            double upd = cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            if (cfg.weight_decay != 0.0) upd += cfg.lr * cfg.weight_decay * static_cast<double>(p->value[i]);
            p->value[i] = static_cast<S>(static_cast<double>(p->value[i]) - upd);
        }
        p->zero_grad();
    }
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using Param = ParamT<float>;

} // namespace avloc
