#pragma once

// Dependency modeling over the fused pyramid features: a temporal aggregation
// branch (projection to class width + per-level self-attention) and a serial
// stack of hard-gated expert layers. Each layer picks exactly one expert via
// a Gumbel-Softmax gate; training keeps the gate trainable with a
// straight-through estimator, inference executes only the selected expert.

#include <random>
#include <string>
#include <vector>

#include "avloc/config.hpp"
#include "avloc/layout.hpp"
#include "avloc/nn.hpp"
#include "avloc/tensor.hpp"

namespace avloc {

struct GateDecision {
    std::vector<double> logits;
    std::vector<double> soft; // relaxation probabilities (empty in argmax mode)
    int selected = 0;
    double tau = 1.0;
};

template <typename S>
struct ForwardOptionsT {
    GateMode gate_mode = GateMode::Argmax;
    double tau = 1.0;
    std::mt19937_64* gumbel_rng = nullptr; // required for HardST / Soft
    bool record_attention = false;
    bool prune_experts = true; // argmax mode: run only the selected expert
};

template <typename S>
class TemporalAggregateT {
public:
    TemporalAggregateT(ParamStoreT<S>& store, const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
        proj_ = LinearLayer<S>(store, "agg.proj", 2 * cfg.d_model, cfg.num_classes, rng);
        for (int i = 0; i < cfg.n1 + cfg.n2; ++i) {
            blocks_.emplace_back(store, "agg.block" + std::to_string(i), cfg.num_classes, cfg.heads, rng);
        }
    }

    // Returns (z_tilde, z_t): the tap after n1 blocks and the final output.
    std::pair<TensorT<S>, TensorT<S>> forward(TapeT<S>* tape, const TensorT<S>& f_av, const TensorT<S>& f_va,
                                              const PyramidLayout& layout) const {
        const Mask allow = attention_mask_grouped(layout.valid, layout.level_of);
        TensorT<S> z = concat_cols<S>({f_av, f_va});
        TensorT<S> x = apply_row_mask(proj_.forward(tape, z), layout.valid);
        TensorT<S> z_tilde = x;
        for (int i = 0; i < cfg_.n1 + cfg_.n2; ++i) {
            x = blocks_[static_cast<size_t>(i)].forward(tape, x, layout.valid, allow);
            if (i + 1 == cfg_.n1) z_tilde = x;
        }
        return {z_tilde, x};
    }

private:
    ModelConfig cfg_;
    LinearLayer<S> proj_;
    std::vector<SelfAttentionBlock<S>> blocks_;
};

// One expert: temporal convolution, a C x C adjacency map applied per
// position, and a LeakyReLU.
template <typename S>
struct ExpertT {
    ParamT<S>* conv_kernel = nullptr; // [3 x C x C]
    ParamT<S>* adjacency = nullptr;   // [C x C]
    static constexpr S kLeakySlope = S(0.01);

    ExpertT() = default;
    ExpertT(ParamStoreT<S>& store, const std::string& prefix, int c, std::mt19937_64& rng) {
        conv_kernel = &store.add(prefix + ".conv", {3, c, c},
                                 init::xavier<S>(rng, 3 * c, c, static_cast<size_t>(3) * c * c));
        // Near pass-through at start so early routing noise is harmless.
        adjacency = &store.add(prefix + ".adj", {c, c}, init::identity_plus_noise<S>(rng, c, 0.01));
    }

    TensorT<S> apply(TapeT<S>* tape, const TensorT<S>& z) const {
        TensorT<S> conv = conv1d(z, param_tensor(tape, *conv_kernel), 1, Padding::Same);
        // out[t] = A * conv[t]
        TensorT<S> mixed = matmul_nt(conv, param_tensor(tape, *adjacency));
        return leaky_relu(mixed, kLeakySlope);
    }
};

template <typename S>
class GatedExpertStackT {
public:
    GatedExpertStackT(ParamStoreT<S>& store, const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
        const int c = cfg.num_classes;
        for (int layer = 0; layer < cfg.moe_layers; ++layer) {
            const std::string p = "experts.layer" + std::to_string(layer);
            gates_.emplace_back(store, p + ".gate", c, c, cfg.num_experts, rng);
            experts_.emplace_back();
            for (int j = 0; j < cfg.num_experts; ++j) {
                experts_.back().emplace_back(store, p + ".e" + std::to_string(j), c, rng);
            }
        }
        usage_counts_.assign(static_cast<size_t>(cfg.moe_layers),
                             std::vector<std::int64_t>(static_cast<size_t>(cfg.num_experts), 0));
    }

    // Runs the expert chain from z_start; records the route and gate states.
    TensorT<S> forward(TapeT<S>* tape, const TensorT<S>& z_start, const PyramidLayout& layout,
                       const ForwardOptionsT<S>& opt, std::vector<int>& route,
                       std::vector<GateDecision>& decisions) {
        TensorT<S> z = z_start;
        route.clear();
        decisions.clear();
        for (int layer = 0; layer < cfg_.moe_layers; ++layer) {
            TensorT<S> pooled = mean_rows_masked(z, layout.valid); // [C]
            TensorT<S> pooled_row = reshape_row(pooled);
            TensorT<S> logits_row = gates_[static_cast<size_t>(layer)].forward(tape, pooled_row);
            TensorT<S> logits = reshape_flat(logits_row);

            std::vector<S> noise;
            if (opt.gate_mode != GateMode::Argmax) {
                if (!opt.gumbel_rng) throw ContractError("gated experts: sampling mode needs an RNG");
                noise = sample_gumbel(*opt.gumbel_rng, cfg_.num_experts);
            }
            TensorT<S> gate = gumbel_gate(logits, noise, static_cast<S>(opt.tau), opt.gate_mode);

            GateDecision dec;
            dec.tau = opt.tau;
            for (int j = 0; j < cfg_.num_experts; ++j) {
                dec.logits.push_back(static_cast<double>(logits.values()[static_cast<size_t>(j)]));
            }
            int selected = 0;
            if (opt.gate_mode == GateMode::Soft) {
                for (int j = 0; j < cfg_.num_experts; ++j) {
                    dec.soft.push_back(static_cast<double>(gate.values()[static_cast<size_t>(j)]));
                    if (dec.soft[static_cast<size_t>(j)] > dec.soft[static_cast<size_t>(selected)]) selected = j;
                }
            } else {
                for (int j = 0; j < cfg_.num_experts; ++j) {
                    if (gate.values()[static_cast<size_t>(j)] == S(1)) selected = j;
                }
            }
            dec.selected = selected;
            decisions.push_back(dec);
            route.push_back(selected);
            usage_counts_[static_cast<size_t>(layer)][static_cast<size_t>(selected)] += 1;

            const auto& layer_experts = experts_[static_cast<size_t>(layer)];
            TensorT<S> mixed;
            if (opt.gate_mode == GateMode::Argmax && opt.prune_experts) {
                mixed = layer_experts[static_cast<size_t>(selected)].apply(tape, z);
            } else {
                std::vector<TensorT<S>> outs;
                outs.reserve(layer_experts.size());
                for (const auto& e : layer_experts) outs.push_back(e.apply(tape, z));
                mixed = weighted_mix(gate, outs);
            }
            z = add(z, mixed);
        }
        return z;
    }

    const std::vector<std::vector<std::int64_t>>& usage_counts() const { return usage_counts_; }
    void reset_usage() {
        for (auto& layer : usage_counts_) std::fill(layer.begin(), layer.end(), 0);
    }

private:
    static TensorT<S> reshape_row(const TensorT<S>& x) { // [C] -> [1 x C]
        return reshape(x, {1, static_cast<int>(x.numel())});
    }
    static TensorT<S> reshape_flat(const TensorT<S>& x) { // [1 x C] -> [C]
        return reshape(x, {static_cast<int>(x.numel())});
    }

    static TensorT<S> reshape(const TensorT<S>& x, std::vector<int> shape) {
        TapeT<S>* tape = x.on_tape() ? x.tape() : nullptr;
        typename TapeT<S>::BackwardFn bw;
        if (tape) {
            const int xn = x.node();
            bw = [xn](TapeT<S>& tp, const std::vector<S>& g) {
                auto& gx = tp.grad_accum(xn, g.size());
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            };
        }
        return TensorT<S>::make(tape, std::move(shape), x.values(), "reshape", std::move(bw));
    }

    static std::vector<S> sample_gumbel(std::mt19937_64& rng, int n) {
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::vector<S> g(static_cast<size_t>(n));
        for (auto& v : g) {
            double u = unit(rng);
            u = std::min(std::max(u, 1e-12), 1.0 - 1e-12);
            v = static_cast<S>(-std::log(-std::log(u)));
        }
        return g;
    }

    ModelConfig cfg_;
    std::vector<MlpHead<S>> gates_;
    std::vector<std::vector<ExpertT<S>>> experts_;
    std::vector<std::vector<std::int64_t>> usage_counts_;
};

// Per-layer expert-selection frequencies from a log of routes; empty log
// yields an empty table.
inline std::vector<std::vector<double>> expert_usage_stats(const std::vector<std::vector<int>>& routes,
                                                           int layers, int experts) {
    if (routes.empty()) return {};
    std::vector<std::vector<double>> freq(static_cast<size_t>(layers),
                                          std::vector<double>(static_cast<size_t>(experts), 0.0));
    for (const auto& r : routes) {
        if (static_cast<int>(r.size()) != layers) throw ContractError("usage stats: route length mismatch");
        for (int l = 0; l < layers; ++l) {
            if (r[static_cast<size_t>(l)] < 0 || r[static_cast<size_t>(l)] >= experts) {
                throw ContractError("usage stats: expert index out of range");
            }
            freq[static_cast<size_t>(l)][static_cast<size_t>(r[static_cast<size_t>(l)])] += 1.0;
        }
    }
    for (auto& layer : freq)
        for (auto& f : layer) f /= static_cast<double>(routes.size());
    return freq;
}

} // namespace avloc
