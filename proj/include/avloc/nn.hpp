#pragma once

// Parameter storage and the transformer building blocks shared by the fusion
// and aggregation stacks. Layers hold pointers into a ParamStore, which owns
// every learnable tensor in registration order (the order also fixes the
// checkpoint layout).

#include <cmath>
#include <deque>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "avloc/tensor.hpp"

namespace avloc {

template <typename S>
class ParamStoreT {
public:
    ParamT<S>& add(std::string name, std::vector<int> shape, std::vector<S> init) {
        if (shape_numel(shape) != static_cast<std::int64_t>(init.size())) {
            throw ShapeError("param " + name + ": init length " + std::to_string(init.size()) +
                             " does not match shape " + shape_str(shape));
        }
        params_.emplace_back();
        ParamT<S>& p = params_.back();
        p.name = std::move(name);
        p.shape = std::move(shape);
        p.value = std::move(init);
        p.grad.assign(p.value.size(), S(0));
        p.adam_m.assign(p.value.size(), S(0));
        p.adam_v.assign(p.value.size(), S(0));
        return p;
    }

    std::vector<ParamT<S>*> all() {
        std::vector<ParamT<S>*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(&p);
        return out;
    }

    ParamT<S>* find(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    void zero_grads() {
        for (auto& p : params_) p.zero_grad();
    }

    std::int64_t total_numel() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += static_cast<std::int64_t>(p.value.size());
        return n;
    }

    size_t count() const { return params_.size(); }

private:
    std::deque<ParamT<S>> params_; // deque: stable addresses across add()
};

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

namespace init {

template <typename S>
std::vector<S> xavier(std::mt19937_64& rng, int fan_in, int fan_out, size_t n) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<S> v(n);
    for (auto& x : v) x = static_cast<S>(dist(rng));
    return v;
}

template <typename S>
std::vector<S> normal(std::mt19937_64& rng, double stddev, size_t n) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<S> v(n);
    for (auto& x : v) x = static_cast<S>(dist(rng));
    return v;
}

template <typename S>
std::vector<S> constant(S value, size_t n) {
    return std::vector<S>(n, value);
}

template <typename S>
std::vector<S> identity_plus_noise(std::mt19937_64& rng, int dim, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<S> v(static_cast<size_t>(dim) * dim);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j)
            v[static_cast<size_t>(i) * dim + j] = static_cast<S>((i == j ? 1.0 : 0.0) + dist(rng));
    return v;
}

} // namespace init

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename S>
struct LinearLayer {
    ParamT<S>* w = nullptr;
    ParamT<S>* b = nullptr;

    LinearLayer() = default;
    LinearLayer(ParamStoreT<S>& store, const std::string& prefix, int din, int dout,
                std::mt19937_64& rng, bool bias = true) {
        w = &store.add(prefix + ".w", {din, dout}, init::xavier<S>(rng, din, dout, static_cast<size_t>(din) * dout));
        if (bias) b = &store.add(prefix + ".b", {dout}, init::constant<S>(S(0), static_cast<size_t>(dout)));
    }

    TensorT<S> forward(TapeT<S>* tape, const TensorT<S>& x) const {
        TensorT<S> wt = param_tensor(tape, *w);
        TensorT<S> out = matmul(x, wt);
        if (b) {
            TensorT<S> bt = param_tensor(tape, *b);
            out = add_rowvec(out, bt);
        }
        return out;
    }
};

template <typename S>
struct LayerNormLayer {
    ParamT<S>* gain = nullptr;
    ParamT<S>* bias = nullptr;

    LayerNormLayer() = default;
    LayerNormLayer(ParamStoreT<S>& store, const std::string& prefix, int dim) {
        gain = &store.add(prefix + ".gain", {dim}, init::constant<S>(S(1), static_cast<size_t>(dim)));
        bias = &store.add(prefix + ".bias", {dim}, init::constant<S>(S(0), static_cast<size_t>(dim)));
    }

    TensorT<S> forward(TapeT<S>* tape, const TensorT<S>& x) const {
        return layer_norm(x, param_tensor(tape, *gain), param_tensor(tape, *bias));
    }
};

// Two linear layers with a PReLU between them (guidance and gate MLPs).
template <typename S>
struct MlpHead {
    LinearLayer<S> fc1, fc2;
    ParamT<S>* slope = nullptr;

    MlpHead() = default;
    MlpHead(ParamStoreT<S>& store, const std::string& prefix, int din, int hidden, int dout,
            std::mt19937_64& rng) {
        fc1 = LinearLayer<S>(store, prefix + ".fc1", din, hidden, rng);
        fc2 = LinearLayer<S>(store, prefix + ".fc2", hidden, dout, rng);
        slope = &store.add(prefix + ".prelu", {1}, init::constant<S>(S(0.25), 1));
    }

    TensorT<S> forward(TapeT<S>* tape, const TensorT<S>& x) const {
        TensorT<S> h = prelu(fc1.forward(tape, x), param_tensor(tape, *slope));
        return fc2.forward(tape, h);
    }
};

// Two linear layers with GELU, hidden width 4x.
template <typename S>
struct FeedForward {
    LinearLayer<S> fc1, fc2;

    FeedForward() = default;
    FeedForward(ParamStoreT<S>& store, const std::string& prefix, int dim, std::mt19937_64& rng) {
        fc1 = LinearLayer<S>(store, prefix + ".fc1", dim, 4 * dim, rng);
        fc2 = LinearLayer<S>(store, prefix + ".fc2", 4 * dim, dim, rng);
    }

    TensorT<S> forward(TapeT<S>* tape, const TensorT<S>& x) const {
        return fc2.forward(tape, gelu(fc1.forward(tape, x)));
    }
};

// Post-softmax attention scores averaged over heads, for the CSV export.
struct AttnRecord {
    int query_len = 0;
    int key_len = 0;
    std::vector<double> scores; // row-major [query_len x key_len]
};

template <typename S>
struct MultiHeadAttention {
    LinearLayer<S> wq, wk, wv, wo;
    int heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStoreT<S>& store, const std::string& prefix, int dim, int num_heads,
                       std::mt19937_64& rng)
        : heads(num_heads) {
        if (dim % num_heads != 0) {
            throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by " +
                              std::to_string(num_heads) + " heads");
        }
        wq = LinearLayer<S>(store, prefix + ".wq", dim, dim, rng);
        wk = LinearLayer<S>(store, prefix + ".wk", dim, dim, rng);
        wv = LinearLayer<S>(store, prefix + ".wv", dim, dim, rng);
        wo = LinearLayer<S>(store, prefix + ".wo", dim, dim, rng);
    }

    // Scaled dot-product attention; `allow` is an optional [Tq x Tk] mask.
    TensorT<S> forward(TapeT<S>* tape, const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                       const Mask* allow = nullptr, AttnRecord* record = nullptr) const {
        const int dim = q.cols();
        const int dh = dim / heads;
        const S att_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
        TensorT<S> qp = wq.forward(tape, q);
        TensorT<S> kp = wk.forward(tape, k);
        TensorT<S> vp = wv.forward(tape, v);
        if (record) {
            record->query_len = q.rows();
            record->key_len = k.rows();
            record->scores.assign(static_cast<size_t>(q.rows()) * k.rows(), 0.0);
        }
        std::vector<TensorT<S>> head_outs;
        head_outs.reserve(static_cast<size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            TensorT<S> qh = slice_cols(qp, h * dh, (h + 1) * dh);
            TensorT<S> kh = slice_cols(kp, h * dh, (h + 1) * dh);
            TensorT<S> vh = slice_cols(vp, h * dh, (h + 1) * dh);
            TensorT<S> attn = softmax_rows(scale(matmul_nt(qh, kh), att_scale), allow);
            if (record) {
                const auto& av = attn.values();
                for (size_t i = 0; i < av.size(); ++i)
                    record->scores[i] += static_cast<double>(av[i]) / heads;
            }
            head_outs.push_back(matmul(attn, vh));
        }
        return wo.forward(tape, concat_cols(head_outs));
    }
};

// Pre-norm self-attention block: x + MSA(LN(x)), then x + FFN(LN(x)),
// re-masked so padded rows stay exactly zero.
template <typename S>
struct SelfAttentionBlock {
    LayerNormLayer<S> ln1, ln2;
    MultiHeadAttention<S> msa;
    FeedForward<S> ffn;

    SelfAttentionBlock() = default;
    SelfAttentionBlock(ParamStoreT<S>& store, const std::string& prefix, int dim, int heads,
                       std::mt19937_64& rng) {
        ln1 = LayerNormLayer<S>(store, prefix + ".ln1", dim);
        msa = MultiHeadAttention<S>(store, prefix + ".msa", dim, heads, rng);
        ln2 = LayerNormLayer<S>(store, prefix + ".ln2", dim);
        ffn = FeedForward<S>(store, prefix + ".ffn", dim, rng);
    }

    TensorT<S> forward(TapeT<S>* tape, const TensorT<S>& x, const Mask& valid, const Mask& allow,
                       AttnRecord* record = nullptr) const {
        TensorT<S> n1 = ln1.forward(tape, x);
        TensorT<S> x1 = add(x, msa.forward(tape, n1, n1, n1, &allow, record));
        TensorT<S> x2 = add(x1, ffn.forward(tape, ln2.forward(tape, x1)));
        return apply_row_mask(x2, valid);
    }
};

// Pre-norm cross-attention block: q + MCA(LN(q), kv, kv), then FFN residual.
template <typename S>
struct CrossAttentionBlock {
    LayerNormLayer<S> lnq, ln2;
    MultiHeadAttention<S> mca;
    FeedForward<S> ffn;

    CrossAttentionBlock() = default;
    CrossAttentionBlock(ParamStoreT<S>& store, const std::string& prefix, int dim, int heads,
                        std::mt19937_64& rng) {
        lnq = LayerNormLayer<S>(store, prefix + ".lnq", dim);
        mca = MultiHeadAttention<S>(store, prefix + ".mca", dim, heads, rng);
        ln2 = LayerNormLayer<S>(store, prefix + ".ln2", dim);
        ffn = FeedForward<S>(store, prefix + ".ffn", dim, rng);
    }

    TensorT<S> forward(TapeT<S>* tape, const TensorT<S>& q, const TensorT<S>& kv,
                       const Mask& q_valid, const Mask& allow, AttnRecord* record = nullptr) const {
        TensorT<S> x1 = add(q, mca.forward(tape, lnq.forward(tape, q), kv, kv, &allow, record));
        TensorT<S> x2 = add(x1, ffn.forward(tape, ln2.forward(tape, x1)));
        return apply_row_mask(x2, q_valid);
    }
};

// ---------------------------------------------------------------------------
// Mask helpers
// ---------------------------------------------------------------------------

// allow[i][j] = valid[i] && valid[j]: padded positions neither attend nor are
// attended to.
inline Mask attention_mask(const Mask& valid) {
    const size_t t = valid.size();
    Mask allow(t * t, 0);
    for (size_t i = 0; i < t; ++i) {
        if (!valid[i]) continue;
        for (size_t j = 0; j < t; ++j) allow[i * t + j] = valid[j];
    }
    return allow;
}

// Cross mask between two equally long streams sharing a validity mask.
inline Mask attention_mask(const Mask& q_valid, const Mask& k_valid) {
    const size_t tq = q_valid.size(), tk = k_valid.size();
    Mask allow(tq * tk, 0);
    for (size_t i = 0; i < tq; ++i) {
        if (!q_valid[i]) continue;
        for (size_t j = 0; j < tk; ++j) allow[i * tk + j] = k_valid[j];
    }
    return allow;
}

// Block-diagonal mask: positions attend only within their own group.
inline Mask attention_mask_grouped(const Mask& valid, const std::vector<int>& group) {
    const size_t t = valid.size();
    Mask allow(t * t, 0);
    for (size_t i = 0; i < t; ++i) {
        if (!valid[i]) continue;
        for (size_t j = 0; j < t; ++j)
            allow[i * t + j] = (valid[j] && group[i] == group[j]) ? 1 : 0;
    }
    return allow;
}

} // namespace avloc
