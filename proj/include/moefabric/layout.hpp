#pragma once

// Symmetric tensor layout L in R^{P x R x B x E x C' x H}, one copy per
// device. Index arithmetic, the write-validity rules, and the sizing
// formulas live here; storage lives in the fabric.
//
// Every one-sided write into a peer's copy of L is addressed by the sender's
// own device id along the P dimension, with B selecting the incoming buffer.
// That is the whole conflict-freedom argument: two distinct senders can
// never produce the same valid coordinate on the same target.

#include <cstdint>
#include <stdexcept>
#include <string>

#include "moefabric/config.hpp"

namespace moefabric {

enum class Round : std::int64_t { dispatch = 0, combine = 1 };

// B dimension: 0 = outgoing staging (writer-local), 1 = incoming.
inline constexpr std::int64_t kStageOut = 0;
inline constexpr std::int64_t kStageIn = 1;

struct LayoutSpec {
    std::int64_t devices = 1;        // P
    static constexpr std::int64_t rounds = 2;   // R: dispatch, combine
    static constexpr std::int64_t buffers = 2;  // B: outgoing, incoming
    std::int64_t local_experts = 1;  // E
    std::int64_t slot_capacity = 1;  // C' (bM-aligned)
    std::int64_t embed_dim = 1;      // H

    static LayoutSpec from_config(const MoeConfig& cfg) {
        LayoutSpec s;
        s.devices = cfg.devices;
        s.local_experts = cfg.local_experts();
        s.slot_capacity = padded_capacity(expert_capacity(cfg), cfg.tile_rows);
        s.embed_dim = cfg.embed_dim;
        return s;
    }

    std::int64_t cell_bytes() const { return embed_dim * 4; }  // one slot row, FP32
    std::int64_t element_count() const {
        return devices * rounds * buffers * local_experts * slot_capacity * embed_dim;
    }
    std::int64_t bytes() const { return element_count() * 4; }
};

/// Index coordinates i = (p*, r, b, e, c) at slot granularity.
struct WriteCoords {
    std::int64_t p_star = 0;
    Round round = Round::dispatch;
    std::int64_t buffer = kStageIn;
    std::int64_t expert = 0;
    std::int64_t slot = 0;
};

/// A one-sided write w(p_s, p_t, i).
struct WriteDescriptor {
    std::int64_t src = 0;  // p_s
    std::int64_t dst = 0;  // p_t
    WriteCoords at;
};

/// Element offset of a slot row, row-major over (P, R, B, E, C, H).
inline std::int64_t flat_index(const LayoutSpec& spec, const WriteCoords& i) {
    const std::int64_t r = static_cast<std::int64_t>(i.round);
    if (i.p_star < 0 || i.p_star >= spec.devices || r < 0 || r >= LayoutSpec::rounds ||
        i.buffer < 0 || i.buffer >= LayoutSpec::buffers || i.expert < 0 ||
        i.expert >= spec.local_experts || i.slot < 0 || i.slot >= spec.slot_capacity)
        throw std::out_of_range("flat_index: coordinate out of bounds");
    return ((((i.p_star * LayoutSpec::rounds + r) * LayoutSpec::buffers + i.buffer) *
                 spec.local_experts +
             i.expert) *
                spec.slot_capacity +
            i.slot) *
           spec.embed_dim;
}

struct WriteValidity {
    bool ok = false;
    const char* rule = "";  // violated rule when !ok

    explicit operator bool() const { return ok; }
};

/// Validity rules for index coordinates:
///   1. any write with b = incoming must carry p* = p_s (self-loops included);
///   2. b = outgoing is reserved for intra-device staging, so p_s = p_t.
inline WriteValidity validate_write(const WriteDescriptor& w) {
    if (w.at.buffer == kStageIn) {
        if (w.at.p_star != w.src)
            return {false, "rule 1: incoming-buffer writes require p* = p_s"};
        return {true, ""};
    }
    if (w.src != w.dst)
        return {false, "rule 2: staging-buffer writes require p_s = p_t"};
    return {true, ""};
}

/// Size(L) in bytes per the padded sizing formula at FP32:
///   4 * Size(T)                when S / E_total >= bM
///   4 * (bM * E / S) * Size(T) otherwise
/// with Size(T) = S * H * 4. Both branches are exact integers.
inline std::uint64_t size_L(const MoeConfig& cfg) {
    const auto s = static_cast<std::uint64_t>(cfg.tokens_per_device);
    const auto h = static_cast<std::uint64_t>(cfg.embed_dim);
    const auto e = static_cast<std::uint64_t>(cfg.experts_total);
    const auto bm = static_cast<std::uint64_t>(cfg.tile_rows);
    if (s >= bm * e) return 16 * s * h;
    return 16 * bm * e * h;
}

}  // namespace moefabric
