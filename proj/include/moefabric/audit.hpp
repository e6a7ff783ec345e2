#pragma once

// Trace audits over a finished pass: exactly-once execution, tile-granular
// dependency order (GEMM0 < GEMM1 < combine-signal < Combine), scheduler
// work conservation, accounting convergence, and the single-launch property.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "moefabric/runtime.hpp"
#include "moefabric/trace.hpp"

namespace moefabric::audit {

struct Report {
    std::vector<std::string> problems;
    bool ok() const { return problems.empty(); }
    void fail(std::string p) { problems.push_back(std::move(p)); }
};

/// Canonical keys of every task device `dev` must execute, recomputed from
/// the manifests alone (the closed-form recount).
inline std::vector<std::string> expected_task_keys(const std::vector<DispatchManifest>& manifests,
                                                   std::int64_t dev, const TileGrid& g) {
    std::vector<std::string> keys;
    auto key = [](const char* ty, std::int64_t s, std::int64_t e, std::int64_t r, std::int64_t c) {
        return std::string(ty) + ":s" + std::to_string(s) + ":e" + std::to_string(e) + ":r" +
               std::to_string(r) + ":c" + std::to_string(c);
    };
    for (std::size_t src = 0; src < manifests.size(); ++src) {
        const auto& entries = manifests[src].per_device[static_cast<std::size_t>(dev)];
        for (std::size_t le = 0; le < entries.size(); ++le) {
            const std::int64_t n = entries[le].count;
            for (std::int64_t rb = 0; rb < ceil_div(n, g.tile_rows); ++rb) {
                for (std::int64_t cb = 0; cb < g.col_blocks_ffn; ++cb)
                    keys.push_back(key("gemm0", static_cast<std::int64_t>(src),
                                       static_cast<std::int64_t>(le), rb, cb));
                for (std::int64_t cb = 0; cb < g.col_blocks_embed; ++cb)
                    keys.push_back(key("gemm1", static_cast<std::int64_t>(src),
                                       static_cast<std::int64_t>(le), rb, cb));
            }
        }
    }
    const auto& own = manifests[static_cast<std::size_t>(dev)].per_device;
    for (std::size_t owner = 0; owner < own.size(); ++owner) {
        for (std::size_t le = 0; le < own[owner].size(); ++le) {
            const std::int64_t n = own[owner][le].count;
            for (std::int64_t rb = 0; rb < ceil_div(n, g.tile_rows); ++rb)
                for (std::int64_t cb = 0; cb < g.col_blocks_embed; ++cb)
                    keys.push_back(key("combine", static_cast<std::int64_t>(owner),
                                       static_cast<std::int64_t>(le), rb, cb));
        }
    }
    std::sort(keys.begin(), keys.end());
    return keys;
}

/// (a) exactly-once: per device, the multiset of executed tasks equals the
/// closed-form expectation; no duplicates, no omissions.
inline void check_exactly_once(const ForwardResult& res, const TileGrid& g, Report& rep) {
    const auto devices = static_cast<std::int64_t>(res.outputs.size());
    for (std::int64_t d = 0; d < devices; ++d) {
        std::vector<std::string> executed;
        for (const auto& e : res.trace)
            if (e.device == d && std::string_view(e.event) == ev::exec)
                executed.push_back(task_key(e));
        std::sort(executed.begin(), executed.end());
        auto expected = expected_task_keys(res.manifests, d, g);
        if (executed != expected) {
            rep.fail("device " + std::to_string(d) + ": executed " +
                     std::to_string(executed.size()) + " tasks, expected " +
                     std::to_string(expected.size()) + " (or key mismatch)");
        }
    }
}

/// (b) scheduled == taskBound == realized count per the recount.
inline void check_accounting(const ForwardResult& res, const TileGrid& g, Report& rep) {
    for (std::size_t d = 0; d < res.stats.size(); ++d) {
        const TaskStats& st = res.stats[d];
        const std::int64_t realized =
            realized_task_count(res.manifests, static_cast<std::int64_t>(d), g);
        if (st.bound_final != realized || st.scheduled_final != realized ||
            st.executed != realized)
            rep.fail("device " + std::to_string(d) + ": bound=" + std::to_string(st.bound_final) +
                     " scheduled=" + std::to_string(st.scheduled_final) +
                     " executed=" + std::to_string(st.executed) +
                     " recount=" + std::to_string(realized));
    }
}

/// (c) dependency order per tile: all GEMM0 of a row block finish before any
/// of its GEMM1 starts; the tile's put precedes the origin's Combine start.
inline void check_dependencies(const ForwardResult& res, Report& rep) {
    struct Window {
        std::uint64_t last_end = 0;
        std::uint64_t first_start = ~0ull;
    };
    // key: device | type-independent tile identity
    auto block_key = [](std::int32_t dev, std::int32_t src, std::int32_t e, std::int32_t rb) {
        return std::to_string(dev) + "/" + std::to_string(src) + "/" + std::to_string(e) + "/" +
               std::to_string(rb);
    };
    auto tile_key = [](std::int32_t owner, std::int32_t origin, std::int32_t e, std::int32_t rb,
                       std::int32_t cb) {
        return std::to_string(owner) + "/" + std::to_string(origin) + "/" + std::to_string(e) +
               "/" + std::to_string(rb) + "/" + std::to_string(cb);
    };

    std::map<std::string, Window> g0, g1;
    std::map<std::string, std::uint64_t> puts;            // tile -> put time
    std::map<std::string, std::uint64_t> combine_starts;  // tile -> exec start

    for (const auto& e : res.trace) {
        const std::string_view kind(e.event);
        if (kind == ev::exec) {
            const std::string_view ty(e.task_type);
            if (ty == "gemm0") {
                auto& w = g0[block_key(e.device, e.src, e.expert, e.rb)];
                w.last_end = std::max(w.last_end, e.t1);
            } else if (ty == "gemm1") {
                auto& w = g1[block_key(e.device, e.src, e.expert, e.rb)];
                w.first_start = std::min(w.first_start, e.t0);
            } else {
                auto& t = combine_starts[tile_key(e.src, e.device, e.expert, e.rb, e.cb)];
                t = t == 0 ? e.t0 : std::min(t, e.t0);
            }
        } else if (kind == ev::tile_put) {
            puts[tile_key(e.device, e.peer, e.expert, e.rb, e.cb)] = e.t0;
        }
    }

    for (const auto& [key, w1] : g1) {
        auto it = g0.find(key);
        if (it == g0.end()) {
            rep.fail("gemm1 without gemm0 for block " + key);
            continue;
        }
        if (it->second.last_end > w1.first_start)
            rep.fail("gemm0 after gemm1 start for block " + key);
    }
    for (const auto& [key, start] : combine_starts) {
        auto it = puts.find(key);
        if (it == puts.end()) {
            rep.fail("combine without tile put for tile " + key);
            continue;
        }
        if (it->second > start) rep.fail("tile put after combine start for tile " + key);
    }
}

/// (d) zero idle-while-pending scheduler violations.
inline void check_work_conservation(const ForwardResult& res, Report& rep) {
    for (const auto& e : res.trace)
        if (std::string_view(e.event) == ev::conservation_violation)
            rep.fail("work-conservation violation on device " + std::to_string(e.device));
}

/// (e) single persistent launch: one worker-group spawn per device, and each
/// worker spawned exactly once.
inline void check_single_launch(const ForwardResult& res, std::int32_t processors, Report& rep) {
    for (std::size_t d = 0; d < res.stats.size(); ++d)
        if (res.stats[d].launches != 1)
            rep.fail("device " + std::to_string(d) + ": " + std::to_string(res.stats[d].launches) +
                     " worker-group launches");
    std::map<std::pair<std::int32_t, std::string>, int> spawns;
    for (const auto& e : res.trace)
        if (std::string_view(e.event) == ev::spawn) ++spawns[{e.device, e.worker}];
    for (const auto& [who, n] : spawns)
        if (n != 1)
            rep.fail("worker " + who.second + " on device " + std::to_string(who.first) +
                     " spawned " + std::to_string(n) + " times");
    const auto per_device = static_cast<std::size_t>(processors) + 3;  // driver, sub, sched, procs
    if (spawns.size() != per_device * res.stats.size())
        rep.fail("spawn event count " + std::to_string(spawns.size()) + " != expected " +
                 std::to_string(per_device * res.stats.size()));
}

inline Report full_audit(const ForwardResult& res, const TileGrid& g, std::int32_t processors) {
    Report rep;
    check_exactly_once(res, g, rep);
    check_accounting(res, g, rep);
    check_dependencies(res, rep);
    check_work_conservation(res, rep);
    check_single_launch(res, processors, rep);
    return rep;
}

/// Barrier events appear iff the pass ran the bulk-synchronous schedule.
inline std::int64_t barrier_event_count(const ForwardResult& res) {
    std::int64_t n = 0;
    for (const auto& e : res.trace) {
        const std::string_view kind(e.event);
        if (kind == ev::barrier_enter || kind == ev::barrier_exit) ++n;
    }
    return n;
}

}  // namespace moefabric::audit
