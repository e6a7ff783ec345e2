#pragma once

// Independent dense reference for the whole MoE layer: gate -> gather ->
// expert FFN -> weighted scatter-combine, in one address space and one
// thread. Deliberately reimplements the routing policies from the written
// rules (lower-index tie-break, later-token drop, denominator over all k
// selections) without sharing compute code with the runtime path.

#include <cmath>
#include <cstdint>
#include <vector>

#include "moefabric/config.hpp"

namespace moefabric::oracle {

/// Triple-loop FP32 reference product.
inline TokenMatrix naive_matmul(const TokenMatrix& a, const TokenMatrix& b) {
    if (a.cols != b.rows) throw ConfigError("naive_matmul: inner dimensions disagree");
    TokenMatrix c(a.rows, b.cols);
    for (std::int64_t i = 0; i < a.rows; ++i)
        for (std::int64_t j = 0; j < b.cols; ++j) {
            float acc = 0.0f;
            for (std::int64_t k = 0; k < a.cols; ++k) acc += a.at(i, k) * b.at(k, j);
            c.at(i, j) = acc;
        }
    return c;
}

namespace detail {

inline float act(Activation phi, float x) {
    switch (phi) {
        case Activation::relu: return x > 0.0f ? x : 0.0f;
        case Activation::gelu: return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752440f));
        case Activation::identity: return x;
    }
    return x;
}

}  // namespace detail

/// Dense forward with an explicit capacity; capacity 0 drops everything.
inline TokenMatrix dense_moe_forward_with_capacity(const TokenMatrix& a, const GateWeights& gate,
                                                   const std::vector<ExpertParams>& experts,
                                                   const MoeConfig& cfg, std::int64_t capacity) {
    const std::int64_t s = a.rows;
    const std::int64_t h = cfg.embed_dim;
    const std::int64_t d = cfg.ffn_dim;
    const std::int64_t e_total = cfg.experts_total;
    if (a.cols != h) throw ConfigError("dense_moe_forward: token matrix is not S x H");
    if (static_cast<std::int64_t>(experts.size()) != e_total)
        throw ConfigError("dense_moe_forward: expert count mismatch");

    TokenMatrix out(s, h);
    std::vector<std::int64_t> used(static_cast<std::size_t>(e_total), 0);
    std::vector<float> probs(static_cast<std::size_t>(e_total));
    std::vector<float> hidden(static_cast<std::size_t>(d));
    std::vector<char> taken(static_cast<std::size_t>(e_total));

    for (std::int64_t i = 0; i < s; ++i) {
        for (std::int64_t e = 0; e < e_total; ++e) {
            float acc = 0.0f;
            for (std::int64_t x = 0; x < h; ++x) acc += a.at(i, x) * gate.wg.at(x, e);
            probs[static_cast<std::size_t>(e)] = acc;
        }
        float mx = probs[0];
        for (std::int64_t e = 1; e < e_total; ++e) mx = std::max(mx, probs[static_cast<std::size_t>(e)]);
        float sum = 0.0f;
        for (std::int64_t e = 0; e < e_total; ++e) {
            probs[static_cast<std::size_t>(e)] = std::exp(probs[static_cast<std::size_t>(e)] - mx);
            sum += probs[static_cast<std::size_t>(e)];
        }
        for (std::int64_t e = 0; e < e_total; ++e) probs[static_cast<std::size_t>(e)] /= sum;

        // top-k by repeated argmax, lower index wins ties
        std::fill(taken.begin(), taken.end(), 0);
        std::vector<std::int64_t> picks;
        for (std::int64_t j = 0; j < cfg.topk; ++j) {
            std::int64_t best = -1;
            for (std::int64_t e = 0; e < e_total; ++e) {
                if (taken[static_cast<std::size_t>(e)]) continue;
                if (best < 0 || probs[static_cast<std::size_t>(e)] > probs[static_cast<std::size_t>(best)]) best = e;
            }
            taken[static_cast<std::size_t>(best)] = 1;
            picks.push_back(best);
        }
        float denom = 0.0f;
        for (std::int64_t e : picks) denom += probs[static_cast<std::size_t>(e)];

        for (std::int64_t e : picks) {
            std::int64_t& n = used[static_cast<std::size_t>(e)];
            if (n >= capacity) continue;  // dropped: zero contribution
            ++n;
            const float w = denom > 0.0f ? probs[static_cast<std::size_t>(e)] / denom : 0.0f;
            const ExpertParams& ep = experts[static_cast<std::size_t>(e)];
            for (std::int64_t dd = 0; dd < d; ++dd) {
                float acc = 0.0f;
                for (std::int64_t x = 0; x < h; ++x) acc += a.at(i, x) * ep.w1.at(x, dd);
                hidden[static_cast<std::size_t>(dd)] = detail::act(cfg.activation, acc + ep.b1[static_cast<std::size_t>(dd)]);
            }
            for (std::int64_t x = 0; x < h; ++x) {
                float acc = 0.0f;
                for (std::int64_t dd = 0; dd < d; ++dd)
                    acc += hidden[static_cast<std::size_t>(dd)] * ep.w2.at(dd, x);
                out.at(i, x) += w * (acc + ep.b2[static_cast<std::size_t>(x)]);
            }
        }
    }
    return out;
}

/// Dense MoE forward over one device's token shard. Expert capacity applies
/// per shard, mirroring the per-(source, expert) slot ranges of the layout,
/// so sharded runs compare shard by shard.
inline TokenMatrix dense_moe_forward(const TokenMatrix& a, const GateWeights& gate,
                                     const std::vector<ExpertParams>& experts,
                                     const MoeConfig& cfg) {
    return dense_moe_forward_with_capacity(a, gate, experts, cfg, expert_capacity(cfg));
}

}  // namespace moefabric::oracle
