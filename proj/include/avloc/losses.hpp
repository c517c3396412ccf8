#pragma once

// Loss composition: focal classification on the detection grid, 1-D
// generalized-IoU boundary regression on positive locations only, and the
// staged guidance term L_mcls = sum_i alpha_i (L_branch1_i + L_branch2_i).
// The total is the plain sum of the three.

#include <array>

#include "avloc/config.hpp"
#include "avloc/fusion.hpp"
#include "avloc/layout.hpp"
#include "avloc/targets.hpp"
#include "avloc/tensor.hpp"

namespace avloc {

struct LossBreakdown {
    double cls = 0.0;
    double reg = 0.0;
    double mcls = 0.0;
    double total = 0.0;
};

template <typename S>
TensorT<S> multi_stage_loss(const std::array<TensorT<S>, 6>& guidance, const SampleTargets& targets,
                            const Mask& snippet_valid, const PyramidLayout& layout, const ModelConfig& cfg) {
    double prev = 0.0;
    for (double a : {cfg.alpha1, cfg.alpha2, cfg.alpha3}) {
        if (a < 0.0) throw ConfigError("guidance weights must be nonnegative");
        if (a == 0.0) continue; // stage disabled
        if (a <= prev) throw ConfigError("active guidance weights must increase strictly");
        prev = a;
    }
    const S af = static_cast<S>(cfg.focal_alpha);
    const S gm = static_cast<S>(cfg.focal_gamma);
    TensorT<S> total = TensorT<S>::scalar_const(S(0));
    const double alphas[3] = {cfg.alpha1, cfg.alpha2, cfg.alpha3};
    for (int stage = 0; stage < 3; ++stage) {
        if (alphas[stage] == 0.0) continue; // exact-zero gradient for ablated stages
        const auto& labels = stage < 2 ? targets.snippet_labels : targets.pyramid_labels;
        const Mask& valid = stage < 2 ? snippet_valid : layout.valid;
        TensorT<S> branch1 = focal_loss_from_logits(guidance[static_cast<size_t>(2 * stage)], labels, valid, af, gm);
        TensorT<S> branch2 = focal_loss_from_logits(guidance[static_cast<size_t>(2 * stage + 1)], labels, valid, af, gm);
        total = add(total, scale(add(branch1, branch2), static_cast<S>(alphas[stage])));
    }
    return total;
}

template <typename S>
struct TotalLossT {
    TensorT<S> loss;
    LossBreakdown parts;
};

template <typename S>
TotalLossT<S> total_loss(const TensorT<S>& cls_logits, const TensorT<S>& reg,
                         const std::array<TensorT<S>, 6>& guidance, const SampleTargets& targets,
                         const Mask& snippet_valid, const PyramidLayout& layout, const ModelConfig& cfg) {
    TensorT<S> l_cls = focal_loss_from_logits(cls_logits, targets.det_labels, layout.valid,
                                              static_cast<S>(cfg.focal_alpha), static_cast<S>(cfg.focal_gamma));
    TensorT<S> l_reg = giou_mean_loss(reg, targets.positives);
    TensorT<S> l_mcls = multi_stage_loss(guidance, targets, snippet_valid, layout, cfg);
    TotalLossT<S> out;
    out.loss = add(add(l_cls, l_reg), l_mcls);
    out.parts.cls = static_cast<double>(l_cls.scalar());
    out.parts.reg = static_cast<double>(l_reg.scalar());
    out.parts.mcls = static_cast<double>(l_mcls.scalar());
    out.parts.total = static_cast<double>(out.loss.scalar());
    return out;
}

} // namespace avloc
