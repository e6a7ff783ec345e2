#pragma once

// Emulated partitioned global address space: one symmetric heap per device
// plus signal flags, with put-with-signal as the only write path into a
// peer's heap.
//
// Memory model: payload regions are plain memory; ordering comes entirely
// from the flag pair. put_with_signal publishes the flag with a release
// store after the payload copy; poll_flag reads it with acquire. A polled
// signal therefore implies the whole payload is visible. No locks anywhere.

#include <atomic>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moefabric/config.hpp"
#include "moefabric/layout.hpp"
#include "moefabric/tiled_blas.hpp"

namespace moefabric {

struct Signal {
    std::uint64_t value = 0;  // valid token rows in the packet (<= C for dispatch)
    Round round = Round::dispatch;
};

/// Names one flag on a target device. Dispatch flags are per (source device,
/// local expert); combine flags are per output tile (owner, expert, row
/// block, col block).
struct FlagId {
    Round family = Round::dispatch;
    std::int64_t index = 0;
};

/// Tile grid constants shared by the fabric and the runtime.
struct TileGrid {
    std::int64_t tile_rows = 1;   // bM
    std::int64_t tile_cols = 1;   // bN
    std::int64_t row_blocks = 1;  // C' / bM
    std::int64_t col_blocks_ffn = 1;    // ceil(D / bN)
    std::int64_t col_blocks_embed = 1;  // ceil(H / bN)

    static TileGrid from_config(const MoeConfig& cfg) {
        TileGrid g;
        g.tile_rows = cfg.tile_rows;
        g.tile_cols = cfg.tile_cols;
        g.row_blocks = padded_capacity(expert_capacity(cfg), cfg.tile_rows) / cfg.tile_rows;
        g.col_blocks_ffn = ceil_div(cfg.ffn_dim, cfg.tile_cols);
        g.col_blocks_embed = ceil_div(cfg.embed_dim, cfg.tile_cols);
        return g;
    }
};

class Fabric {
  public:
    Fabric(const LayoutSpec& spec, const TileGrid& grid)
        : spec_(spec),
          grid_(grid),
          dispatch_flag_count_(spec.devices * spec.local_experts),
          combine_flag_count_(spec.devices * spec.local_experts * grid.row_blocks *
                              grid.col_blocks_embed),
          heaps_(static_cast<std::size_t>(spec.devices)),
          dispatch_flags_(static_cast<std::size_t>(spec.devices * dispatch_flag_count_)),
          combine_flags_(static_cast<std::size_t>(spec.devices * combine_flag_count_)),
          bytes_(static_cast<std::size_t>(spec.devices * spec.devices)) {
        for (auto& h : heaps_)
            h.assign(static_cast<std::size_t>(spec_.element_count()), 0.0f);
    }

    const LayoutSpec& spec() const { return spec_; }
    const TileGrid& grid() const { return grid_; }
    std::int64_t dispatch_flag_count() const { return dispatch_flag_count_; }
    std::int64_t combine_flag_count() const { return combine_flag_count_; }

    std::int64_t dispatch_flag(std::int64_t src, std::int64_t local_expert) const {
        return src * spec_.local_experts + local_expert;
    }
    std::int64_t combine_flag(std::int64_t owner, std::int64_t local_expert, std::int64_t rb,
                              std::int64_t cb) const {
        return ((owner * spec_.local_experts + local_expert) * grid_.row_blocks + rb) *
                   grid_.col_blocks_embed +
               cb;
    }

    /// Gather into the writer's own outgoing staging buffer (rule 2 write).
    /// Local, unflagged, and never counted as transferred bytes.
    void stage_local(const WriteDescriptor& w, ConstView payload, std::int64_t col0) {
        auto v = validate_write(w);
        if (!v) throw ProtocolError(std::string("stage_local: ") + v.rule);
        if (w.at.buffer != kStageOut) throw ProtocolError("stage_local: staging requires b = 0");
        copy_payload(w, payload, col0);
    }

    /// One-sided write coupled with a signal. The payload lands before the
    /// flag becomes visible; zero padding is never transmitted; the flag
    /// fires exactly once per round.
    void put_with_signal(const WriteDescriptor& w, ConstView payload, std::int64_t col0,
                         FlagId flag, Signal signal) {
        auto v = validate_write(w);
        if (!v) throw ProtocolError(std::string("put_with_signal: ") + v.rule);
        copy_payload(w, payload, col0);
        bytes_[static_cast<std::size_t>(w.src * spec_.devices + w.dst)].fetch_add(
            static_cast<std::uint64_t>(payload.rows * payload.cols * 4),
            std::memory_order_relaxed);
        std::atomic<std::uint64_t>& f = flag_ref(w.dst, flag);
        std::uint64_t expected = 0;
        const std::uint64_t encoded = (signal.value << 1) | 1u;
        if (!f.compare_exchange_strong(expected, encoded, std::memory_order_release,
                                       std::memory_order_relaxed))
            throw ProtocolError("put_with_signal: double signal on flag");
    }

    /// Non-blocking flag read; a returned signal implies the matching
    /// payload is fully visible to the caller.
    std::optional<Signal> poll_flag(std::int64_t device, FlagId flag) const {
        const std::uint64_t raw =
            const_cast<Fabric*>(this)->flag_ref(device, flag).load(std::memory_order_acquire);
        if ((raw & 1u) == 0) return std::nullopt;
        return Signal{raw >> 1, flag.family};
    }

    /// Device-local read access; remote heaps are reachable only via puts.
    const float* heap(std::int64_t device) const {
        return heaps_[static_cast<std::size_t>(device)].data();
    }

    /// Exact per-(src, dst) transferred payload bytes.
    std::vector<std::uint64_t> payload_bytes() const {
        std::vector<std::uint64_t> m(bytes_.size());
        for (std::size_t i = 0; i < bytes_.size(); ++i)
            m[i] = bytes_[i].load(std::memory_order_relaxed);
        return m;
    }

    /// Padded-baseline accounting: every (src, dst) pair is charged the full
    /// C'·H slot block per expert for each of the two rounds, regardless of
    /// occupancy.
    std::vector<std::uint64_t> padded_baseline_bytes() const {
        const std::uint64_t per_pair = 2ull *
                                       static_cast<std::uint64_t>(spec_.local_experts) *
                                       static_cast<std::uint64_t>(spec_.slot_capacity) *
                                       static_cast<std::uint64_t>(spec_.embed_dim) * 4ull;
        return std::vector<std::uint64_t>(
            static_cast<std::size_t>(spec_.devices * spec_.devices), per_pair);
    }

  private:
    void copy_payload(const WriteDescriptor& w, ConstView payload, std::int64_t col0) {
        if (payload.rows < 0 || w.at.slot + payload.rows > spec_.slot_capacity ||
            col0 < 0 || col0 + payload.cols > spec_.embed_dim)
            throw ProtocolError("put: payload outside the authorized slot range");
        if (payload.rows == 0) return;
        float* base = heaps_[static_cast<std::size_t>(w.dst)].data() + flat_index(spec_, w.at) + col0;
        for (std::int64_t r = 0; r < payload.rows; ++r) {
            const float* srow = payload.data + r * payload.stride;
            float* drow = base + r * spec_.embed_dim;
            for (std::int64_t c = 0; c < payload.cols; ++c) drow[c] = srow[c];
        }
    }

    std::atomic<std::uint64_t>& flag_ref(std::int64_t device, FlagId flag) {
        if (flag.family == Round::dispatch) {
            if (flag.index < 0 || flag.index >= dispatch_flag_count_)
                throw std::out_of_range("dispatch flag id");
            return dispatch_flags_[static_cast<std::size_t>(device * dispatch_flag_count_ + flag.index)];
        }
        if (flag.index < 0 || flag.index >= combine_flag_count_)
            throw std::out_of_range("combine flag id");
        return combine_flags_[static_cast<std::size_t>(device * combine_flag_count_ + flag.index)];
    }

    LayoutSpec spec_;
    TileGrid grid_;
    std::int64_t dispatch_flag_count_;
    std::int64_t combine_flag_count_;
    std::vector<std::vector<float>> heaps_;
    std::vector<std::atomic<std::uint64_t>> dispatch_flags_;
    std::vector<std::atomic<std::uint64_t>> combine_flags_;
    std::vector<std::atomic<std::uint64_t>> bytes_;
};

}  // namespace moefabric
