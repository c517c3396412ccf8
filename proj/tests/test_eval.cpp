// Decoding, Soft-NMS and the AP/mAP evaluator, cross-checked against an
// independently written brute-force oracle on tiny instances.

#include <doctest.h>

#include <cmath>
#include <random>

#include "avloc/eval.hpp"

using namespace avloc;

namespace {

// Independent AP recomputation for tiny instances: explicit greedy matching
// and a literal Riemann construction of the interpolated PR curve on the
// 1/G recall grid. Kept free of any code shared with average_precision.
double brute_force_ap_oracle(std::vector<Candidate> cands, std::vector<EventAnnotation> gt, double tau) {
    if (cands.size() > 8 || gt.size() > 4) throw ContractError("oracle: instance too large");
    if (gt.empty()) throw ContractError("oracle: undefined without ground truth");
    if (cands.empty()) return 0.0;
    // score-descending, stable in the original order
    for (size_t i = 0; i < cands.size(); ++i) {
        for (size_t j = i + 1; j < cands.size(); ++j) {
            if (cands[j].score > cands[i].score) std::rotate(cands.begin() + i, cands.begin() + j, cands.begin() + j + 1);
        }
    }
    std::vector<bool> matched(gt.size(), false);
    std::vector<bool> is_tp(cands.size(), false);
    for (size_t i = 0; i < cands.size(); ++i) {
        double best = 0.0;
        int pick = -1;
        for (size_t g = 0; g < gt.size(); ++g) {
            if (matched[g]) continue;
            const double inter =
                std::max(0.0, std::min(cands[i].t_end, gt[g].t_end) - std::max(cands[i].t_start, gt[g].t_start));
            const double uni = (cands[i].t_end - cands[i].t_start) + (gt[g].t_end - gt[g].t_start) - inter;
            const double ov = inter > 0.0 ? inter / uni : 0.0;
            if (ov > best) {
                best = ov;
                pick = static_cast<int>(g);
            }
        }
        if (pick >= 0 && best >= tau) {
            is_tp[i] = true;
            matched[static_cast<size_t>(pick)] = true;
        }
    }
    // precision/recall at every prefix
    std::vector<double> prec(cands.size()), rec(cands.size());
    int tp = 0;
    for (size_t i = 0; i < cands.size(); ++i) {
        if (is_tp[i]) ++tp;
        prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        rec[i] = static_cast<double>(tp) / static_cast<double>(gt.size());
    }
    // AP = sum over the recall grid of the best precision at recall >= k/G
    double ap = 0.0;
    const size_t G = gt.size();
    for (size_t k = 1; k <= G; ++k) {
        const double r = static_cast<double>(k) / static_cast<double>(G);
        double best = 0.0;
        for (size_t i = 0; i < cands.size(); ++i) {
            if (rec[i] >= r) best = std::max(best, prec[i]);
        }
        ap += best / static_cast<double>(G);
    }
    return ap;
}

Candidate cand(int cls, double s, double e, double score) {
    Candidate c;
    c.class_id = cls;
    c.t_start = s;
    c.t_end = e;
    c.score = score;
    return c;
}

} // namespace

TEST_CASE("tiou: identical, partial, disjoint") {
    CHECK(tiou(0, 4, 0, 4) == doctest::Approx(1.0));
    CHECK(tiou(0, 4, 2, 6) == doctest::Approx(1.0 / 3));
    CHECK(tiou(0, 2, 4, 6) == 0.0);
}

TEST_CASE("soft-nms decays duplicates by the gaussian rule") {
    std::vector<Candidate> cands = {cand(0, 2, 6, 0.9), cand(0, 2, 6, 0.8)};
    const auto out = soft_nms(cands, 0.5, 1e-3);
    REQUIRE(out.size() == 2);
    CHECK(out[0].score == doctest::Approx(0.9));
    CHECK(out[1].score == doctest::Approx(0.8 * std::exp(-2.0)).epsilon(1e-6));
    CHECK(out[1].score == doctest::Approx(0.1083).epsilon(1e-3));
}

TEST_CASE("soft-nms leaves non-overlapping and singleton candidates unchanged") {
    std::vector<Candidate> cands = {cand(0, 0, 2, 0.5), cand(0, 5, 9, 0.7)};
    const auto out = soft_nms(cands, 0.5, 1e-3);
    REQUIRE(out.size() == 2);
    CHECK(out[0].score == doctest::Approx(0.7));
    CHECK(out[1].score == doctest::Approx(0.5));
    const auto one = soft_nms({cand(1, 0, 2, 0.4)}, 0.5, 1e-3);
    REQUIRE(one.size() == 1);
    CHECK(one[0].score == doctest::Approx(0.4));
}

TEST_CASE("soft-nms monotonicity and cross-class isolation") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> start(0.0, 20.0);
    std::uniform_real_distribution<double> len(1.0, 8.0);
    std::uniform_real_distribution<double> score(0.05, 0.99);
    std::vector<Candidate> cands;
    for (int i = 0; i < 30; ++i) {
        const double s = start(rng);
        Candidate c = cand(i % 3, s, s + len(rng), score(rng));
        cands.push_back(c);
    }
    const auto out = soft_nms(cands, 0.5, 1e-3);
    double best_in = 0.0;
    for (const auto& c : cands) best_in = std::max(best_in, c.score);
    CHECK(out[0].score == doctest::Approx(best_in)); // global max survives untouched
    for (size_t i = 1; i < out.size(); ++i) CHECK(out[i - 1].score >= out[i].score);
    CHECK(out.size() <= cands.size());

    // class isolation: removing other-class candidates leaves class-0 results identical
    std::vector<Candidate> only0;
    for (const auto& c : cands)
        if (c.class_id == 0) only0.push_back(c);
    const auto out0 = soft_nms(only0, 0.5, 1e-3);
    std::vector<Candidate> mixed0;
    for (const auto& c : out)
        if (c.class_id == 0) mixed0.push_back(c);
    REQUIRE(out0.size() == mixed0.size());
    for (size_t i = 0; i < out0.size(); ++i) {
        CHECK(out0[i].score == doctest::Approx(mixed0[i].score).epsilon(1e-12));
        CHECK(out0[i].t_start == mixed0[i].t_start);
    }
}

TEST_CASE("average precision: threshold sensitivity and the perfect detector") {
    ApInstance inst;
    inst.ground_truth = {{0, 0.0, 10.0}};
    inst.detections = {cand(0, 0, 9, 0.9)}; // tIoU 0.9
    CHECK(average_precision({inst}, 0.5) == doctest::Approx(1.0));
    CHECK(average_precision({inst}, 0.95) == 0.0);

    ApInstance perfect;
    perfect.ground_truth = {{0, 0.0, 4.0}, {0, 6.0, 9.0}};
    perfect.detections = {cand(0, 0, 4, 0.9), cand(0, 6, 9, 0.8)};
    CHECK(average_precision({perfect}, 0.5) == doctest::Approx(1.0));
}

TEST_CASE("average precision agrees with the brute-force oracle on 1000 tiny instances") {
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<int> n_cands(0, 8);
    std::uniform_int_distribution<int> n_gt(1, 4);
    std::uniform_real_distribution<double> start(0.0, 12.0);
    std::uniform_real_distribution<double> len(0.5, 6.0);
    std::uniform_real_distribution<double> score(0.01, 0.99);
    std::uniform_real_distribution<double> tau_dist(0.1, 0.9);
    for (int trial = 0; trial < 1000; ++trial) {
        ApInstance inst;
        const int ng = n_gt(rng);
        for (int g = 0; g < ng; ++g) {
            const double s = start(rng);
            inst.ground_truth.push_back({0, s, s + len(rng)});
        }
        const int nc = n_cands(rng);
        for (int i = 0; i < nc; ++i) {
            const double s = start(rng);
            inst.detections.push_back(cand(0, s, s + len(rng), score(rng)));
        }
        const double tau = tau_dist(rng);
        const double main_ap = average_precision({inst}, tau);
        const double oracle = brute_force_ap_oracle(inst.detections, inst.ground_truth, tau);
        CHECK(std::abs(main_ap - oracle) < 1e-9);
    }
}

TEST_CASE("oracle contracts: no predictions scores zero, oversized instances rejected") {
    CHECK(brute_force_ap_oracle({}, {{0, 0.0, 2.0}}, 0.5) == 0.0);
    std::vector<Candidate> many(9, cand(0, 0, 1, 0.5));
    CHECK_THROWS_AS(brute_force_ap_oracle(many, {{0, 0.0, 2.0}}, 0.5), ContractError);
}

TEST_CASE("mean_ap: empty and perfect predictions, GT-free classes skipped") {
    std::vector<VideoSample> gt(2);
    gt[0].id = "a";
    gt[0].t_len = 20;
    gt[0].events = {{0, 0.0, 5.0}, {1, 8.0, 12.0}};
    gt[1].id = "b";
    gt[1].t_len = 20;
    gt[1].events = {{0, 2.0, 9.0}};

    std::vector<VideoDetections> empty(2);
    empty[0].id = "a";
    empty[1].id = "b";
    const EvalReport zero = mean_ap(empty, gt, 4, default_thresholds());
    CHECK(zero.avg_map == 0.0);
    for (const auto& [k, v] : zero.map_at) CHECK(v == 0.0);

    std::vector<VideoDetections> perfect(2);
    perfect[0].id = "a";
    perfect[0].detections = {cand(0, 0, 5, 0.9), cand(1, 8, 12, 0.8)};
    perfect[1].id = "b";
    perfect[1].detections = {cand(0, 2, 9, 0.95)};
    const EvalReport one = mean_ap(perfect, gt, 4, default_thresholds());
    CHECK(one.avg_map == doctest::Approx(1.0));
}

TEST_CASE("mAP is invariant to strictly monotone score transforms") {
    std::mt19937_64 rng(123);
    std::uniform_real_distribution<double> start(0.0, 16.0);
    std::uniform_real_distribution<double> len(1.0, 6.0);
    std::uniform_real_distribution<double> score(0.01, 0.99);
    std::vector<VideoSample> gt(3);
    std::vector<VideoDetections> dets(3);
    const char* ids[3] = {"a", "b", "c"};
    for (int v = 0; v < 3; ++v) {
        gt[v].id = ids[v];
        gt[v].t_len = 24;
        for (int e = 0; e < 3; ++e) {
            const double s = start(rng);
            gt[v].events.push_back({e % 2, s, s + len(rng)});
        }
        dets[v].id = ids[v];
        for (int i = 0; i < 6; ++i) {
            const double s = start(rng);
            dets[v].detections.push_back(cand(i % 2, s, s + len(rng), score(rng)));
        }
    }
    const EvalReport base = mean_ap(dets, gt, 2, default_thresholds());
    auto transformed = dets;
    for (auto& v : transformed)
        for (auto& d : v.detections) d.score = 0.1 + 0.8 / (1.0 + std::exp(-6.0 * d.score));
    const EvalReport mapped = mean_ap(transformed, gt, 2, default_thresholds());
    CHECK(base.avg_map == doctest::Approx(mapped.avg_map).epsilon(1e-12));
    for (const auto& [k, val] : base.map_at) CHECK(val == doctest::Approx(mapped.map_at.at(k)).epsilon(1e-12));
}

TEST_CASE("decode_candidates: floors, degenerate intervals, stride arithmetic") {
    const int tm = 16, levels = 2, c = 2;
    const PyramidLayout layout = make_pyramid_layout(tm, levels, Mask(tm, 1));
    std::vector<float> p(static_cast<size_t>(layout.total_len) * c, 0.0f);
    std::vector<float> reg(static_cast<size_t>(layout.total_len) * 2 * c, 0.0f);

    // level-2 position with center 10 (index 5 at stride 2)
    const int pos = layout.level_offsets[1] + 5;
    REQUIRE(layout.center[static_cast<size_t>(pos)] == 10.0);
    p[static_cast<size_t>(pos) * c + 1] = 0.8f;
    reg[static_cast<size_t>(pos) * 2 * c + 2] = 1.5f; // d_start
    reg[static_cast<size_t>(pos) * 2 * c + 3] = 2.0f; // d_end

    const auto cands = decode_candidates(p, reg, c, layout, 0.5, 16.0);
    REQUIRE(cands.size() == 1);
    CHECK(cands[0].class_id == 1);
    CHECK(cands[0].t_start == doctest::Approx(10.0 - 1.5 * 2.0)); // = 7
    CHECK(cands[0].t_end == doctest::Approx(10.0 + 2.0 * 2.0).epsilon(1e-6));
    CHECK(cands[0].level == 1);

    CHECK(decode_candidates(p, reg, c, layout, 1.0, 16.0).empty()); // floor above every score

    // zero-length intervals are discarded
    std::vector<float> p2(p.size(), 0.0f);
    std::vector<float> reg2(reg.size(), 0.0f);
    p2[static_cast<size_t>(pos) * c] = 0.9f; // d = (0, 0)
    CHECK(decode_candidates(p2, reg2, c, layout, 0.5, 16.0).empty());
}
