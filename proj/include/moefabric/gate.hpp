#pragma once

// Fused gate: affinity scores, top-k selection with capacity-limited slot
// assignment, and combine weights.
//
// Policy constants (shared with the dense oracle as written rules, not code):
//   - top-k ties break toward the lower expert index;
//   - capacity overflow drops the later token (slots fill in ascending token
//     order per expert);
//   - the combine denominator C_i sums all k selected affinities, including
//     selections that were later capacity-dropped.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "moefabric/config.hpp"
#include "moefabric/tiled_blas.hpp"

namespace moefabric {

struct GateOutput {
    TokenMatrix g_phi;                 // S x E_total softmax probabilities
    std::int64_t capacity = 0;         // C, slots per (device, expert)
    std::vector<SlotMap> table;        // T_phi: E_total x C, token < 0 = empty
    std::vector<std::int64_t> slot_counts;              // occupied slots per expert
    std::vector<std::pair<std::int64_t, std::int64_t>> dropped;  // (token, expert)

    const SlotMap& slot(std::int64_t expert, std::int64_t c) const {
        return table[static_cast<std::size_t>(expert * capacity + c)];
    }
    SlotMap& slot(std::int64_t expert, std::int64_t c) {
        return table[static_cast<std::size_t>(expert * capacity + c)];
    }
};

namespace detail {

/// Indices of the k largest entries of a row, ties toward the lower index.
inline void select_topk(const float* scores, std::int64_t n, std::int64_t k,
                        std::vector<std::int64_t>& out) {
    out.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = i;
    std::stable_sort(out.begin(), out.end(), [&](std::int64_t a, std::int64_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    out.resize(static_cast<std::size_t>(k));
}

}  // namespace detail

/// Gate with an explicit capacity (tests exercise degenerate capacities
/// through this entry point; production goes through gate_forward).
inline GateOutput gate_forward_with_capacity(const TokenMatrix& a, const GateWeights& gate,
                                             const MoeConfig& cfg, std::int64_t capacity) {
    const std::int64_t s = cfg.tokens_per_device;
    const std::int64_t h = cfg.embed_dim;
    const std::int64_t e_total = cfg.experts_total;
    if (a.rows != s || a.cols != h)
        throw ConfigError("gate_forward: token matrix is not S x H");
    if (gate.wg.rows != h || gate.wg.cols != e_total)
        throw ConfigError("gate_forward: gate weights are not H x E_total");

    GateOutput out;
    out.capacity = capacity;
    out.g_phi = TokenMatrix(s, e_total);
    out.table.assign(static_cast<std::size_t>(e_total * std::max<std::int64_t>(capacity, 1)), SlotMap{});
    out.slot_counts.assign(static_cast<std::size_t>(e_total), 0);

    std::vector<std::int64_t> picks;
    for (std::int64_t i = 0; i < s; ++i) {
        // logits z = a_i . Wg, then row softmax
        float* row = out.g_phi.row(i);
        for (std::int64_t e = 0; e < e_total; ++e) {
            float acc = 0.0f;
            for (std::int64_t x = 0; x < h; ++x) acc += a.at(i, x) * gate.wg.at(x, e);
            row[e] = acc;
        }
        float mx = row[0];
        for (std::int64_t e = 1; e < e_total; ++e) mx = std::max(mx, row[e]);
        float sum = 0.0f;
        for (std::int64_t e = 0; e < e_total; ++e) {
            row[e] = std::exp(row[e] - mx);
            sum += row[e];
        }
        for (std::int64_t e = 0; e < e_total; ++e) row[e] /= sum;

        detail::select_topk(row, e_total, cfg.topk, picks);
        float denom = 0.0f;
        for (std::int64_t e : picks) denom += row[e];
        for (std::int64_t e : picks) {
            const float w = denom > 0.0f ? row[e] / denom : 0.0f;
            std::int64_t& n = out.slot_counts[static_cast<std::size_t>(e)];
            if (n < capacity) {
                out.slot(e, n) = SlotMap{i, w};
                ++n;
            } else {
                out.dropped.emplace_back(i, e);
            }
        }
    }
    return out;
}

inline GateOutput gate_forward(const TokenMatrix& a, const GateWeights& gate, const MoeConfig& cfg) {
    return gate_forward_with_capacity(a, gate, cfg, expert_capacity(cfg));
}

/// One destination expert's share of a device's dispatch.
struct ManifestExpert {
    std::int64_t expert_global = 0;
    std::int64_t count = 0;                // occupied slots, <= C
    std::vector<std::int64_t> tokens;      // row indices in slot order
};

/// Per-destination-device dispatch plan. Devices (and experts) with zero
/// routed tokens are present with empty entries; they still get a zero-count
/// signal so the receiver's task bound can converge.
struct DispatchManifest {
    std::vector<std::vector<ManifestExpert>> per_device;  // [P][E_local]

    std::int64_t total_routed() const {
        std::int64_t n = 0;
        for (const auto& d : per_device)
            for (const auto& m : d) n += m.count;
        return n;
    }
};

inline DispatchManifest dispatch_manifest(const GateOutput& gate, const MoeConfig& cfg) {
    const std::int64_t e_local = cfg.local_experts();
    DispatchManifest mf;
    mf.per_device.resize(static_cast<std::size_t>(cfg.devices));
    for (std::int64_t d = 0; d < cfg.devices; ++d) {
        auto& dev = mf.per_device[static_cast<std::size_t>(d)];
        dev.resize(static_cast<std::size_t>(e_local));
        for (std::int64_t le = 0; le < e_local; ++le) {
            const std::int64_t e = d * e_local + le;
            ManifestExpert& m = dev[static_cast<std::size_t>(le)];
            m.expert_global = e;
            m.count = gate.slot_counts[static_cast<std::size_t>(e)];
            m.tokens.reserve(static_cast<std::size_t>(m.count));
            for (std::int64_t c = 0; c < m.count; ++c)
                m.tokens.push_back(gate.slot(e, c).token);
        }
    }
    return mf;
}

}  // namespace moefabric
