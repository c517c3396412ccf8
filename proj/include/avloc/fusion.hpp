#pragma once

// Early cross-modal fusion: per-modality temporal attention, a Hadamard
// aligner feeding a fused stream, fused-query cross-attention into each
// modality, and a multi-resolution bidirectional cross-attention pyramid.
// Six per-stage MLP heads emit snippet-level class logits for the staged
// guidance losses.

#include <array>
#include <random>
#include <string>
#include <vector>

#include "avloc/config.hpp"
#include "avloc/data.hpp"
#include "avloc/layout.hpp"
#include "avloc/nn.hpp"
#include "avloc/tensor.hpp"

namespace avloc {

// The three intermediate feature pairs plus guidance logits.
template <typename S>
struct FusionOutputsT {
    TensorT<S> stage1_a, stage1_v;   // [T_m x D]
    TensorT<S> stage2_av, stage2_va; // [T_m x D]
    TensorT<S> stage3_av, stage3_va; // [T_l x D]
    std::array<TensorT<S>, 6> guidance; // logits: s1a, s1v, s2av, s2va, s3av, s3va
    // Post-softmax attention maps (head-averaged), filled when requested:
    // stage 1 = per-modality self-attention, stage 2 = fused-query cross
    // attention, stage 3 = full-resolution pyramid cross attention.
    std::array<AttnRecord, 6> attention;
    bool has_attention = false;
};

template <typename S>
class EarlyFusionT {
public:
    EarlyFusionT(ParamStoreT<S>& store, const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
        const int d = cfg.d_model;
        proj_a_ = LinearLayer<S>(store, "fusion.proj_a", cfg.d_audio, d, rng);
        proj_v_ = LinearLayer<S>(store, "fusion.proj_v", cfg.d_visual, d, rng);
        pos_a_ = &store.add("fusion.pos_a", {cfg.t_max, d}, init::normal<S>(rng, 0.02, static_cast<size_t>(cfg.t_max) * d));
        pos_v_ = &store.add("fusion.pos_v", {cfg.t_max, d}, init::normal<S>(rng, 0.02, static_cast<size_t>(cfg.t_max) * d));
        stage1_a_ = SelfAttentionBlock<S>(store, "fusion.stage1_a", d, cfg.heads, rng);
        stage1_v_ = SelfAttentionBlock<S>(store, "fusion.stage1_v", d, cfg.heads, rng);
        // Aligner projections are deliberately separate parameters from the
        // stage-1 projections; the two paths run in parallel.
        align_proj_a_ = LinearLayer<S>(store, "fusion.align.proj_a", cfg.d_audio, d, rng);
        align_proj_v_ = LinearLayer<S>(store, "fusion.align.proj_v", cfg.d_visual, d, rng);
        pos_g_ = &store.add("fusion.align.pos", {cfg.t_max, d}, init::normal<S>(rng, 0.02, static_cast<size_t>(cfg.t_max) * d));
        align_ln_ = LayerNormLayer<S>(store, "fusion.align.ln", d);
        align_msa_ = MultiHeadAttention<S>(store, "fusion.align.msa", d, cfg.heads, rng);
        early_block_ = SelfAttentionBlock<S>(store, "fusion.early", d, cfg.heads, rng);
        mix_av_ = CrossAttentionBlock<S>(store, "fusion.mix_av", d, cfg.heads, rng);
        mix_va_ = CrossAttentionBlock<S>(store, "fusion.mix_va", d, cfg.heads, rng);
        for (int l = 0; l < cfg.levels; ++l) {
            const std::string p = "fusion.pyr" + std::to_string(l);
            if (l > 0) {
                down_a_.push_back(&store.add(p + ".down_a", {3, d}, init::normal<S>(rng, 0.5, static_cast<size_t>(3) * d)));
                down_v_.push_back(&store.add(p + ".down_v", {3, d}, init::normal<S>(rng, 0.5, static_cast<size_t>(3) * d)));
            }
            pyr_av_.emplace_back(store, p + ".av", d, cfg.heads, rng);
            pyr_va_.emplace_back(store, p + ".va", d, cfg.heads, rng);
        }
        const char* head_names[6] = {"s1a", "s1v", "s2av", "s2va", "s3av", "s3va"};
        for (int i = 0; i < 6; ++i) {
            heads_[static_cast<size_t>(i)] =
                MlpHead<S>(store, std::string("fusion.head_") + head_names[i], d, d, cfg.num_classes, rng);
        }
    }

    FusionOutputsT<S> forward(TapeT<S>* tape, const PaddedSample& sample, const PyramidLayout& layout,
                              bool record_attention) const {
        const Mask& valid = sample.valid;
        const Mask allow = attention_mask(valid);
        FusionOutputsT<S> out;
        out.has_attention = record_attention;
        AttnRecord* rec = record_attention ? out.attention.data() : nullptr;

        TensorT<S> audio = to_tensor(sample.audio, sample.d_audio);
        TensorT<S> visual = to_tensor(sample.visual, sample.d_visual);

        TensorT<S> xa = apply_row_mask(add(proj_a_.forward(tape, audio), param_tensor(tape, *pos_a_)), valid);
        TensorT<S> xv = apply_row_mask(add(proj_v_.forward(tape, visual), param_tensor(tape, *pos_v_)), valid);
        out.stage1_a = stage1_a_.forward(tape, xa, valid, allow, rec ? &rec[0] : nullptr);
        out.stage1_v = stage1_v_.forward(tape, xv, valid, allow, rec ? &rec[1] : nullptr);

        // Aligner: Hadamard product of dedicated projections, then one
        // residual self-attention pass.
        TensorT<S> fg = mul(align_proj_a_.forward(tape, audio), align_proj_v_.forward(tape, visual));
        fg = apply_row_mask(add(fg, param_tensor(tape, *pos_g_)), valid);
        TensorT<S> n = align_ln_.forward(tape, fg);
        TensorT<S> fg_opt = apply_row_mask(add(fg, align_msa_.forward(tape, n, n, n, &allow)), valid);
        TensorT<S> fg_hat = early_block_.forward(tape, fg_opt, valid, allow);

        out.stage2_av = mix_av_.forward(tape, fg_hat, out.stage1_a, valid, allow, rec ? &rec[2] : nullptr);
        out.stage2_va = mix_va_.forward(tape, fg_hat, out.stage1_v, valid, allow, rec ? &rec[3] : nullptr);

        // Pyramid: strided depthwise downsampling, one bidirectional
        // cross-attention block per level, levels chained post-block.
        std::vector<TensorT<S>> parts_a, parts_v;
        TensorT<S> a = out.stage2_av;
        TensorT<S> v = out.stage2_va;
        for (int l = 0; l < cfg_.levels; ++l) {
            const Mask& lv = layout.level_valid[static_cast<size_t>(l)];
            if (l > 0) {
                a = apply_row_mask(depthwise_conv1d(a, param_tensor(tape, *down_a_[static_cast<size_t>(l - 1)]), 2), lv);
                v = apply_row_mask(depthwise_conv1d(v, param_tensor(tape, *down_v_[static_cast<size_t>(l - 1)]), 2), lv);
            }
            const Mask lallow = attention_mask(lv);
            TensorT<S> a2 = pyr_av_[static_cast<size_t>(l)].forward(tape, a, v, lv, lallow,
                                                                    (rec && l == 0) ? &rec[4] : nullptr);
            TensorT<S> v2 = pyr_va_[static_cast<size_t>(l)].forward(tape, v, a, lv, lallow,
                                                                    (rec && l == 0) ? &rec[5] : nullptr);
            parts_a.push_back(a2);
            parts_v.push_back(v2);
            a = a2;
            v = v2;
        }
        out.stage3_av = concat_rows(parts_a);
        out.stage3_va = concat_rows(parts_v);

        out.guidance[0] = heads_[0].forward(tape, out.stage1_a);
        out.guidance[1] = heads_[1].forward(tape, out.stage1_v);
        out.guidance[2] = heads_[2].forward(tape, out.stage2_av);
        out.guidance[3] = heads_[3].forward(tape, out.stage2_va);
        out.guidance[4] = heads_[4].forward(tape, out.stage3_av);
        out.guidance[5] = heads_[5].forward(tape, out.stage3_va);
        return out;
    }

private:
    static TensorT<S> to_tensor(const std::vector<float>& v, int dim) {
        std::vector<S> data(v.size());
        for (size_t i = 0; i < v.size(); ++i) data[i] = static_cast<S>(v[i]);
        return TensorT<S>::constant({static_cast<int>(v.size()) / dim, dim}, std::move(data));
    }

    ModelConfig cfg_;
    LinearLayer<S> proj_a_, proj_v_;
    ParamT<S>* pos_a_ = nullptr;
    ParamT<S>* pos_v_ = nullptr;
    SelfAttentionBlock<S> stage1_a_, stage1_v_;
    LinearLayer<S> align_proj_a_, align_proj_v_;
    ParamT<S>* pos_g_ = nullptr;
    LayerNormLayer<S> align_ln_;
    MultiHeadAttention<S> align_msa_;
    SelfAttentionBlock<S> early_block_;
    CrossAttentionBlock<S> mix_av_, mix_va_;
    std::vector<ParamT<S>*> down_a_, down_v_;
    std::vector<CrossAttentionBlock<S>> pyr_av_, pyr_va_;
    std::array<MlpHead<S>, 6> heads_;
};

} // namespace avloc
