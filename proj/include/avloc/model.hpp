#pragma once

// The end-to-end pipeline: early fusion with staged guidance heads, temporal
// aggregation, the gated expert chain, and the decoding heads. Float
// instantiation is the training/inference path; the double instantiation
// exists for finite-difference gradient checks.

#include <random>

#include "avloc/config.hpp"
#include "avloc/data.hpp"
#include "avloc/decoder.hpp"
#include "avloc/experts.hpp"
#include "avloc/fusion.hpp"
#include "avloc/layout.hpp"
#include "avloc/nn.hpp"
#include "avloc/tensor.hpp"

namespace avloc {

template <typename S>
struct ForwardResultT {
    PyramidLayout layout;
    FusionOutputsT<S> fusion;
    TensorT<S> z_tilde; // [T_l x C] aggregation tap feeding the expert chain
    TensorT<S> z_t;     // [T_l x C] aggregation output
    TensorT<S> z_hat;   // [T_l x C] z_t + expert-chain output
    DecoderOutputsT<S> decoder;
    std::vector<int> route;
    std::vector<GateDecision> gates;
};

template <typename S>
class PipelineT {
public:
    PipelineT(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        fusion_ = std::make_unique<EarlyFusionT<S>>(store_, cfg_, rng);
        aggregate_ = std::make_unique<TemporalAggregateT<S>>(store_, cfg_, rng);
        experts_ = std::make_unique<GatedExpertStackT<S>>(store_, cfg_, rng);
        decoder_ = std::make_unique<DecoderHeadsT<S>>(store_, cfg_, rng);
    }

    ForwardResultT<S> forward(const PaddedSample& sample, TapeT<S>* tape, const ForwardOptionsT<S>& opt) {
        if (static_cast<int>(sample.valid.size()) != cfg_.t_max) {
            throw ShapeError("pipeline: sample padded to " + std::to_string(sample.valid.size()) +
                             ", model expects t_max " + std::to_string(cfg_.t_max));
        }
        if (sample.d_audio != cfg_.d_audio || sample.d_visual != cfg_.d_visual) {
            throw ShapeError("pipeline: feature widths " + std::to_string(sample.d_audio) + "/" +
                             std::to_string(sample.d_visual) + " do not match configured " +
                             std::to_string(cfg_.d_audio) + "/" + std::to_string(cfg_.d_visual));
        }
        ForwardResultT<S> out;
        out.layout = make_pyramid_layout(cfg_.t_max, cfg_.levels, sample.valid);
        out.fusion = fusion_->forward(tape, sample, out.layout, opt.record_attention);
        auto [z_tilde, z_t] = aggregate_->forward(tape, out.fusion.stage3_av, out.fusion.stage3_va, out.layout);
        out.z_tilde = z_tilde;
        out.z_t = z_t;
        TensorT<S> z_e = experts_->forward(tape, z_tilde, out.layout, opt, out.route, out.gates);
        out.z_hat = add(z_t, z_e);
        out.decoder = decoder_->forward(tape, out.z_hat);
        return out;
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStoreT<S>& params() { return store_; }
    EarlyFusionT<S>& fusion() { return *fusion_; }
    TemporalAggregateT<S>& aggregate() { return *aggregate_; }
    GatedExpertStackT<S>& experts() { return *experts_; }
    DecoderHeadsT<S>& decoder() { return *decoder_; }

private:
    ModelConfig cfg_;
    ParamStoreT<S> store_;
    std::unique_ptr<EarlyFusionT<S>> fusion_;
    std::unique_ptr<TemporalAggregateT<S>> aggregate_;
    std::unique_ptr<GatedExpertStackT<S>> experts_;
    std::unique_ptr<DecoderHeadsT<S>> decoder_;
};

using Pipeline = PipelineT<float>;
using ForwardOptions = ForwardOptionsT<float>;
using ForwardResult = ForwardResultT<float>;

} // namespace avloc
