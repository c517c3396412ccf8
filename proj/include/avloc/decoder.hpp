#pragma once

// Decoding heads on the integrated pyramid features: a classification stack
// ending in sigmoid and a class-aware boundary-regression stack ending in
// ReLU. Both are three K=3 same-padded temporal convolutions with GELU
// between layers; the regression head emits (start, end) distance channels
// per class, in units of each position's level stride.

#include <random>
#include <string>

#include "avloc/config.hpp"
#include "avloc/nn.hpp"
#include "avloc/tensor.hpp"

namespace avloc {

template <typename S>
struct DecoderOutputsT {
    TensorT<S> cls_logits; // [T_l x C]
    TensorT<S> p;          // [T_l x C], sigmoid of cls_logits
    TensorT<S> reg;        // [T_l x 2C], channel (2c, 2c+1) = (d_start, d_end)
};

template <typename S>
class DecoderHeadsT {
public:
    DecoderHeadsT(ParamStoreT<S>& store, const ModelConfig& cfg, std::mt19937_64& rng) {
        const int c = cfg.num_classes;
        cls_w_[0] = conv_param(store, "decoder.cls0", c, c, rng);
        cls_b_[0] = &store.add("decoder.cls0.b", {c}, init::constant<S>(S(0), static_cast<size_t>(c)));
        cls_w_[1] = conv_param(store, "decoder.cls1", c, c, rng);
        cls_b_[1] = &store.add("decoder.cls1.b", {c}, init::constant<S>(S(0), static_cast<size_t>(c)));
        cls_w_[2] = conv_param(store, "decoder.cls2", c, c, rng);
        // Start near the background prior so early training is not spent
        // suppressing thousands of easy negatives.
        cls_b_[2] = &store.add("decoder.cls2.b", {c}, init::constant<S>(S(-4), static_cast<size_t>(c)));
        reg_w_[0] = conv_param(store, "decoder.reg0", c, c, rng);
        reg_b_[0] = &store.add("decoder.reg0.b", {c}, init::constant<S>(S(0), static_cast<size_t>(c)));
        reg_w_[1] = conv_param(store, "decoder.reg1", c, c, rng);
        reg_b_[1] = &store.add("decoder.reg1.b", {c}, init::constant<S>(S(0), static_cast<size_t>(c)));
        reg_w_[2] = conv_param(store, "decoder.reg2", c, 2 * c, rng);
        reg_b_[2] = &store.add("decoder.reg2.b", {2 * c}, init::constant<S>(S(0.5), static_cast<size_t>(2 * c)));
    }

    DecoderOutputsT<S> forward(TapeT<S>* tape, const TensorT<S>& z_hat) const {
        DecoderOutputsT<S> out;
        TensorT<S> x = z_hat;
        for (int i = 0; i < 3; ++i) {
            TensorT<S> b = param_tensor(tape, *cls_b_[static_cast<size_t>(i)]);
            x = conv1d(x, param_tensor(tape, *cls_w_[static_cast<size_t>(i)]), 1, Padding::Same, &b);
            if (i < 2) x = gelu(x);
        }
        out.cls_logits = x;
        out.p = sigmoid(x);
        TensorT<S> r = z_hat;
        for (int i = 0; i < 3; ++i) {
            TensorT<S> b = param_tensor(tape, *reg_b_[static_cast<size_t>(i)]);
            r = conv1d(r, param_tensor(tape, *reg_w_[static_cast<size_t>(i)]), 1, Padding::Same, &b);
            if (i < 2) r = gelu(r);
        }
        out.reg = relu(r);
        return out;
    }

private:
    static ParamT<S>* conv_param(ParamStoreT<S>& store, const std::string& name, int cin, int cout,
                                 std::mt19937_64& rng) {
        return &store.add(name + ".w", {3, cin, cout},
                          init::xavier<S>(rng, 3 * cin, cout, static_cast<size_t>(3) * cin * cout));
    }

    ParamT<S>* cls_w_[3] = {};
    ParamT<S>* cls_b_[3] = {};
    ParamT<S>* reg_w_[3] = {};
    ParamT<S>* reg_b_[3] = {};
};

} // namespace avloc
