#pragma once

// Persistent actor runtime: one worker group per simulated device, spawned
// once per forward pass and never respawned. Per device:
//
//   driver      computes the fused gate, seeds the task bound, performs the
//               dispatch puts, then waits for completion;
//   subscriber  polls dispatch/combine flags, self-corrects the task bound
//               from signal counts, and decodes packets into task
//               descriptors;
//   scheduler   sweeps doorbells, keeps a ready queue of idle processor
//               ids, and assigns every task exactly once; on reaching the
//               task bound it interrupts the subscriber and processors;
//   processors  execute GEMM0 / GEMM1 / Combine tasks; GEMM0 completion
//               counters gate the enqueue of GEMM1; GEMM1 sends its output
//               tile to the origin device's combine buffer with a per-tile
//               signal.
//
// Devices interact only through the fabric. Intra-device queues are
// multi-producer single-consumer with atomic publication; there is no
// blocking collective anywhere in overlapped mode. Sequential mode inserts
// two global barriers (after dispatch and after expert compute) to model
// the bulk-synchronous baseline schedule.

#include <atomic>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "moefabric/config.hpp"
#include "moefabric/gate.hpp"
#include "moefabric/layout.hpp"
#include "moefabric/pgas.hpp"
#include "moefabric/tiled_blas.hpp"
#include "moefabric/trace.hpp"

namespace moefabric {

enum class TaskType : std::uint8_t { gemm0, gemm1, combine };
enum class BinaryOp : std::uint8_t { matmul, hadamard };

inline const char* to_string(TaskType t) {
    switch (t) {
        case TaskType::gemm0: return "gemm0";
        case TaskType::gemm1: return "gemm1";
        case TaskType::combine: return "combine";
    }
    return "?";
}

/// t = (M, *, phi). The metadata names the packet (origin device for GEMM0/1,
/// expert owner for Combine), the local expert, the tile coordinates, and the
/// resolved input/output region handles.
struct TaskDescriptor {
    TaskType type = TaskType::gemm0;
    BinaryOp star = BinaryOp::matmul;
    Activation phi = Activation::identity;
    std::int32_t src = -1;      // packet origin (gemm0/1) or expert owner (combine)
    std::int32_t expert = -1;   // local expert index on the owning device
    std::int32_t row_block = 0;
    std::int32_t col_block = 0;
    std::int32_t rows = 0;      // valid rows in this row block
    std::int64_t in_offset = 0;   // own heap (gemm0/combine) or scratch (gemm1)
    std::int64_t out_offset = 0;  // scratch (gemm0); peer combine buffer (gemm1)
    std::uint64_t row_mask = 0;   // combine: touched O row blocks (~0 = conflicts with all)
};

enum class ScheduleMode : std::uint8_t { overlapped, sequential };

struct StragglerSpec {
    enum class Kind : std::uint8_t { none, constant, uniform, lognormal };
    Kind kind = Kind::none;
    double a = 0.0;  // constant: delay ms; uniform: lo ms; lognormal: median ms
    double b = 0.0;  // uniform: hi ms; lognormal: sigma
    std::int32_t device = 0;
};

struct ForwardOptions {
    std::int32_t processors = 4;  // N per device
    ScheduleMode mode = ScheduleMode::overlapped;
    StragglerSpec straggler;
    std::int64_t deadlock_budget_ms = 5000;
    std::uint64_t seed = 0;  // straggler sampling
};

struct TaskStats {
    std::int64_t gemm0 = 0;
    std::int64_t gemm1 = 0;
    std::int64_t combine = 0;
    std::int64_t enqueued = 0;
    std::int64_t executed = 0;
    std::int64_t bound_initial = 0;
    std::int64_t bound_final = 0;
    std::int64_t scheduled_final = 0;
    std::int64_t launches = 0;  // worker-group spawns; must be 1 per pass

    std::int64_t total() const { return gemm0 + gemm1 + combine; }
};

struct ForwardResult {
    std::vector<TokenMatrix> outputs;          // O shards, one per device
    std::vector<GateOutput> gates;             // per-device T_phi / G_phi
    std::vector<DispatchManifest> manifests;   // per-device outgoing plan
    std::vector<TraceEvent> trace;
    std::vector<std::uint64_t> bytes;          // P x P efficient payload bytes
    std::vector<std::uint64_t> bytes_padded;   // P x P padded-baseline bytes
    std::vector<TaskStats> stats;              // per device
    std::uint64_t makespan_ns = 0;
};

// ---- task-count arithmetic ------------------------------------------------

/// GEMM0 + GEMM1 tasks decoded from a packet of n valid rows.
inline std::int64_t gemm_tasks_for_rows(std::int64_t n, const TileGrid& g) {
    if (n <= 0) return 0;
    return ceil_div(n, g.tile_rows) * (g.col_blocks_ffn + g.col_blocks_embed);
}

/// Combine tiles produced for a packet of n rows sent to one expert.
inline std::int64_t combine_tiles_for_rows(std::int64_t n, const TileGrid& g) {
    if (n <= 0) return 0;
    return ceil_div(n, g.tile_rows) * g.col_blocks_embed;
}

/// Per-packet worst case: a full C' rows.
inline std::int64_t worst_gemm_tasks_per_packet(const LayoutSpec& spec, const TileGrid& g) {
    return (spec.slot_capacity / g.tile_rows) * (g.col_blocks_ffn + g.col_blocks_embed);
}

/// Predefined upper bound used before any signal arrives: full packets from
/// P senders for every local expert, plus k * ceil(S/bM) * ceil(H/bN)
/// combine tiles.
inline std::int64_t initial_task_bound(const MoeConfig& cfg, const LayoutSpec& spec,
                                       const TileGrid& g) {
    return spec.devices * spec.local_experts * worst_gemm_tasks_per_packet(spec, g) +
           cfg.topk * ceil_div(cfg.tokens_per_device, g.tile_rows) * g.col_blocks_embed;
}

/// Bound update on seeing one dispatch signal of n rows.
inline std::int64_t self_correct_task_bound(std::int64_t bound, std::int64_t n,
                                            const LayoutSpec& spec, const TileGrid& g) {
    return bound + gemm_tasks_for_rows(n, g) - worst_gemm_tasks_per_packet(spec, g);
}

/// Exact realized task count on `device`, recomputed from all manifests:
/// GEMM0/GEMM1 for every packet it receives plus Combine tiles for every
/// packet it sent out.
inline std::int64_t realized_task_count(const std::vector<DispatchManifest>& manifests,
                                        std::int64_t device, const TileGrid& g) {
    std::int64_t n = 0;
    for (const auto& mf : manifests)
        for (const auto& m : mf.per_device[static_cast<std::size_t>(device)])
            n += gemm_tasks_for_rows(m.count, g);
    for (const auto& dev_entries : manifests[static_cast<std::size_t>(device)].per_device)
        for (const auto& m : dev_entries) n += combine_tiles_for_rows(m.count, g);
    return n;
}

// ---- internals -------------------------------------------------------------

namespace detail {

inline constexpr std::int64_t kMailEmpty = -1;
inline constexpr std::int64_t kMailInterrupt = -2;

/// Reusable spin barrier that aborts when the group faults.
class SpinBarrier {
  public:
    SpinBarrier(std::int32_t parties, const std::atomic<bool>& fault)
        : parties_(parties), fault_(fault) {}

    void arrive_and_wait() {
        const std::int64_t gen = generation_.load(std::memory_order_acquire);
        if (count_.fetch_add(1, std::memory_order_acq_rel) + 1 == parties_) {
            count_.store(0, std::memory_order_relaxed);
            generation_.fetch_add(1, std::memory_order_release);
            return;
        }
        while (generation_.load(std::memory_order_acquire) == gen) {
            if (fault_.load(std::memory_order_relaxed)) throw RuntimeFault("barrier aborted: group fault");
            std::this_thread::yield();
        }
    }

  private:
    std::int32_t parties_;
    const std::atomic<bool>& fault_;
    std::atomic<std::int64_t> count_{0};
    std::atomic<std::int64_t> generation_{0};
};

/// Append-only task list plus the scheduler-facing counters.
struct TaskQueues {
    std::vector<TaskDescriptor> slots;
    std::vector<std::atomic<std::uint8_t>> ready;
    std::atomic<std::int64_t> tail{0};
    std::atomic<std::int64_t> sub_doorbell{0};
    std::atomic<std::int64_t> proc_doorbell{0};
    std::atomic<std::int64_t> task_bound{0};
    std::atomic<std::int64_t> scheduled{0};

    explicit TaskQueues(std::int64_t capacity)
        : slots(static_cast<std::size_t>(capacity)),
          ready(static_cast<std::size_t>(capacity)) {}

    std::int64_t append(const TaskDescriptor& t) {
        const std::int64_t i = tail.fetch_add(1, std::memory_order_relaxed);
        if (i >= static_cast<std::int64_t>(slots.size()))
            throw RuntimeFault("task queue overflow: capacity accounting bug");
        slots[static_cast<std::size_t>(i)] = t;
        ready[static_cast<std::size_t>(i)].store(1, std::memory_order_release);
        return i;
    }
};

struct GroupCtx;

/// Everything one simulated device owns.
struct DeviceCtx {
    std::int32_t id = 0;
    const MoeConfig* cfg = nullptr;
    GroupCtx* group = nullptr;

    TokenMatrix input;   // A shard, S x H
    TokenMatrix output;  // O shard, S x H
    const ExpertParams* experts = nullptr;  // E_local entries

    GateOutput gate;
    DispatchManifest manifest;

    std::vector<float> scratch;  // C1: (P * E_local) blocks of C' x D
    std::unique_ptr<TaskQueues> queues;
    std::vector<std::atomic<std::int64_t>> mailbox;    // per processor
    std::vector<std::atomic<std::uint8_t>> idle;       // per processor
    std::vector<std::atomic<std::int32_t>> g0_done;    // per (src, expert, rb)
    std::atomic<std::int64_t> executed_total{0};
    std::atomic<std::int64_t> executed_gemm{0};
    std::atomic<std::int64_t> realized_gemm{0};
    std::atomic<std::int64_t> signals_seen{0};
    std::atomic<std::uint8_t> interrupt_sub{0};
    std::atomic<std::int32_t> phase{0};  // sequential gating: 1 = compute, 2 = combine
    std::atomic<std::int64_t> launches{0};

    std::vector<TraceBuffer> tracebuf;  // driver, subscriber, scheduler, processors...
    TaskStats stats;

    DeviceCtx(std::int64_t procs, std::int64_t qcap, std::int64_t g0slots)
        : queues(std::make_unique<TaskQueues>(qcap)),
          mailbox(static_cast<std::size_t>(procs)),
          idle(static_cast<std::size_t>(procs)),
          g0_done(static_cast<std::size_t>(g0slots)),
          tracebuf(static_cast<std::size_t>(procs) + 3) {
        for (auto& m : mailbox) m.store(kMailEmpty, std::memory_order_relaxed);
        for (auto& f : idle) f.store(1, std::memory_order_relaxed);
    }

    std::int64_t sent_count(std::int64_t owner, std::int64_t le) const {
        return manifest.per_device[static_cast<std::size_t>(owner)][static_cast<std::size_t>(le)].count;
    }
};

struct GroupCtx {
    const MoeConfig* cfg = nullptr;
    const ModelWeights* model = nullptr;
    LayoutSpec spec;
    TileGrid grid;
    std::unique_ptr<Fabric> fabric;
    ForwardOptions opts;
    std::vector<std::unique_ptr<DeviceCtx>> devices;
    std::atomic<bool> fault{false};
    std::string fault_reason;
    std::mutex fault_mu;
    std::unique_ptr<SpinBarrier> barrier;  // sequential mode only
    Clock::time_point epoch;

    void raise(const std::string& why) {
        {
            std::lock_guard<std::mutex> lk(fault_mu);
            if (fault_reason.empty()) fault_reason = why;
        }
        fault.store(true, std::memory_order_release);
    }

    std::int64_t scratch_base(std::int64_t src, std::int64_t le) const {
        return (src * spec.local_experts + le) * spec.slot_capacity * cfg->ffn_dim;
    }

    std::string dump() const {
        std::ostringstream os;
        os << "runtime state:";
        for (const auto& d : devices) {
            os << " dev" << d->id << "{bound=" << d->queues->task_bound.load()
               << ",sched=" << d->queues->scheduled.load()
               << ",enq=" << d->queues->tail.load()
               << ",exec=" << d->executed_total.load()
               << ",signals=" << d->signals_seen.load() << "}";
        }
        return os.str();
    }
};

// ---- dispatch ---------------------------------------------------------------

inline double sample_delay_ms(const StragglerSpec& s, std::mt19937_64& rng) {
    switch (s.kind) {
        case StragglerSpec::Kind::none: return 0.0;
        case StragglerSpec::Kind::constant: return s.a;
        case StragglerSpec::Kind::uniform: {
            std::uniform_real_distribution<double> d(s.a, s.b);
            return d(rng);
        }
        case StragglerSpec::Kind::lognormal: {
            std::lognormal_distribution<double> d(std::log(std::max(s.a, 1e-9)), s.b);
            return d(rng);
        }
    }
    return 0.0;
}

/// Gather each destination expert's rows into the outgoing staging buffer,
/// then put-with-signal into the owner's incoming dispatch buffer. Empty
/// experts still get a zero-count signal so task bounds can converge
/// without timeouts.
inline void dispatch_tokens(DeviceCtx& dev, TraceBuffer& tb) {
    GroupCtx& g = *dev.group;
    const std::int64_t e_local = g.spec.local_experts;
    const std::int64_t h = g.spec.embed_dim;
    const bool delayed = g.opts.straggler.kind != StragglerSpec::Kind::none &&
                         g.opts.straggler.device == dev.id;
    std::mt19937_64 rng(g.opts.seed ^ (0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(dev.id) + 1)));

    std::vector<float> gather;
    for (std::int64_t t = 0; t < g.spec.devices; ++t) {
        for (std::int64_t le = 0; le < e_local; ++le) {
            const ManifestExpert& m =
                dev.manifest.per_device[static_cast<std::size_t>(t)][static_cast<std::size_t>(le)];
            const std::int64_t n = m.count;
            ConstView payload{nullptr, 0, h, h};
            if (n > 0) {
                gather.resize(static_cast<std::size_t>(n * h));
                for (std::int64_t i = 0; i < n; ++i) {
                    const float* row = dev.input.row(m.tokens[static_cast<std::size_t>(i)]);
                    std::copy(row, row + h, gather.data() + i * h);
                }
                // stage in the outgoing buffer (rule-2 write into our own heap)
                WriteDescriptor stage{dev.id, dev.id, {t, Round::dispatch, kStageOut, le, 0}};
                g.fabric->stage_local(stage, ConstView{gather.data(), n, h, h}, 0);
                payload = ConstView{g.fabric->heap(dev.id) + flat_index(g.spec, stage.at), n, h, h};
            }
            if (delayed) {
                const double ms = sample_delay_ms(g.opts.straggler, rng);
                if (ms > 0.0)
                    std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
            }
            WriteDescriptor w{dev.id, t, {dev.id, Round::dispatch, kStageIn, le, 0}};
            g.fabric->put_with_signal(w, payload, 0, FlagId{Round::dispatch, g.fabric->dispatch_flag(dev.id, le)},
                                      Signal{static_cast<std::uint64_t>(n), Round::dispatch});
            TraceEvent& e = tb.emit(ev::dispatch_put);
            e.peer = static_cast<std::int32_t>(t);
            e.expert = static_cast<std::int32_t>(le);
            e.value = n * h * 4;
        }
    }
}

// ---- subscriber -------------------------------------------------------------

inline void subscriber_run(DeviceCtx& dev, TraceBuffer& tb) {
    GroupCtx& g = *dev.group;
    TaskQueues& q = *dev.queues;
    const TileGrid& grid = g.grid;
    const std::int64_t e_local = g.spec.local_experts;
    const std::int64_t h = g.spec.embed_dim;
    const std::int64_t d_ffn = g.cfg->ffn_dim;
    const std::int64_t dispatch_flags = g.fabric->dispatch_flag_count();
    const std::int64_t combine_flags = g.fabric->combine_flag_count();
    const std::int64_t row_blocks_total = ceil_div(g.cfg->tokens_per_device, grid.tile_rows);
    const bool sequential = g.opts.mode == ScheduleMode::sequential;

    std::vector<char> dvis(static_cast<std::size_t>(dispatch_flags), 0);
    std::vector<char> cvis(static_cast<std::size_t>(combine_flags), 0);

    tb.emit(ev::spawn);
    while (!dev.interrupt_sub.load(std::memory_order_acquire) &&
           !g.fault.load(std::memory_order_relaxed)) {
        bool progressed = false;
        const std::int32_t phase = dev.phase.load(std::memory_order_acquire);
        if (!sequential || phase >= 1) {
            for (std::int64_t id = 0; id < dispatch_flags; ++id) {
                if (dvis[static_cast<std::size_t>(id)]) continue;
                auto sig = g.fabric->poll_flag(dev.id, FlagId{Round::dispatch, id});
                if (!sig) continue;
                dvis[static_cast<std::size_t>(id)] = 1;  // mark visited
                progressed = true;
                const std::int64_t n = static_cast<std::int64_t>(sig->value);
                const std::int64_t src = id / e_local;
                const std::int64_t le = id % e_local;

                const std::int64_t old_bound = q.task_bound.load(std::memory_order_relaxed);
                const std::int64_t new_bound = self_correct_task_bound(old_bound, n, g.spec, grid);
                q.task_bound.store(new_bound, std::memory_order_release);
                if (new_bound < q.tail.load(std::memory_order_relaxed)) {
                    g.raise("task bound underflow on device " + std::to_string(dev.id));
                    return;
                }
                dev.realized_gemm.fetch_add(gemm_tasks_for_rows(n, grid), std::memory_order_acq_rel);
                dev.signals_seen.fetch_add(1, std::memory_order_acq_rel);
                {
                    TraceEvent& e = tb.emit(ev::dispatch_seen);
                    e.src = static_cast<std::int32_t>(src);
                    e.expert = static_cast<std::int32_t>(le);
                    e.value = n;
                }
                {
                    // carries the (order-independent) per-packet delta
                    TraceEvent& e = tb.emit(ev::bound_correct);
                    e.value = new_bound - old_bound;
                }
                if (n == 0) continue;
                // memory consistency is enforced by the acquire poll above;
                // decode the packet into GEMM0 descriptors
                std::int64_t count = 0;
                for (std::int64_t rb = 0; rb < ceil_div(n, grid.tile_rows); ++rb) {
                    const std::int64_t rows = std::min(grid.tile_rows, n - rb * grid.tile_rows);
                    for (std::int64_t cb = 0; cb < grid.col_blocks_ffn; ++cb) {
                        TaskDescriptor t;
                        t.type = TaskType::gemm0;
                        t.star = BinaryOp::matmul;
                        t.phi = g.cfg->activation;
                        t.src = static_cast<std::int32_t>(src);
                        t.expert = static_cast<std::int32_t>(le);
                        t.row_block = static_cast<std::int32_t>(rb);
                        t.col_block = static_cast<std::int32_t>(cb);
                        t.rows = static_cast<std::int32_t>(rows);
                        t.in_offset = flat_index(
                            g.spec, {src, Round::dispatch, kStageIn, le, rb * grid.tile_rows});
                        t.out_offset = g.scratch_base(src, le) + rb * grid.tile_rows * d_ffn +
                                       cb * grid.tile_cols;
                        q.append(t);
                        TraceEvent& e = tb.emit(ev::enqueue);
                        e.task_type = to_string(t.type);
                        e.src = t.src;
                        e.expert = t.expert;
                        e.rb = t.row_block;
                        e.cb = t.col_block;
                        ++count;
                    }
                }
                q.sub_doorbell.fetch_add(count, std::memory_order_release);  // notify scheduler
            }
        }
        if (!sequential || phase >= 2) {
            for (std::int64_t id = 0; id < combine_flags; ++id) {
                if (cvis[static_cast<std::size_t>(id)]) continue;
                auto sig = g.fabric->poll_flag(dev.id, FlagId{Round::combine, id});
                if (!sig) continue;
                cvis[static_cast<std::size_t>(id)] = 1;
                progressed = true;
                // flag id encodes (owner, expert, rb, cb)
                std::int64_t rest = id;
                const std::int64_t cb = rest % grid.col_blocks_embed;
                rest /= grid.col_blocks_embed;
                const std::int64_t rb = rest % grid.row_blocks;
                rest /= grid.row_blocks;
                const std::int64_t le = rest % e_local;
                const std::int64_t owner = rest / e_local;
                const std::int64_t sent = dev.sent_count(owner, le);
                const std::int64_t rows = std::min(grid.tile_rows, sent - rb * grid.tile_rows);
                if (rows <= 0 || static_cast<std::int64_t>(sig->value) != rows) {
                    g.raise("combine signal row count mismatch on device " + std::to_string(dev.id));
                    return;
                }
                TaskDescriptor t;
                t.type = TaskType::combine;
                t.star = BinaryOp::hadamard;
                t.phi = Activation::identity;
                t.src = static_cast<std::int32_t>(owner);
                t.expert = static_cast<std::int32_t>(le);
                t.row_block = static_cast<std::int32_t>(rb);
                t.col_block = static_cast<std::int32_t>(cb);
                t.rows = static_cast<std::int32_t>(rows);
                t.in_offset =
                    flat_index(g.spec, {owner, Round::combine, kStageIn, le, rb * grid.tile_rows}) +
                    cb * grid.tile_cols;
                // touched output row blocks, for the scheduler's combine exclusion
                const std::int64_t e_global = owner * e_local + le;
                std::uint64_t mask = 0;
                bool overflow = row_blocks_total > 64;
                for (std::int64_t i = 0; i < rows && !overflow; ++i) {
                    const std::int64_t tok = dev.gate.slot(e_global, rb * grid.tile_rows + i).token;
                    const std::int64_t blk = tok / grid.tile_rows;
                    if (blk >= 64) overflow = true;
                    else mask |= (1ull << blk);
                }
                t.row_mask = overflow ? ~0ull : mask;
                q.append(t);
                {
                    TraceEvent& e = tb.emit(ev::combine_seen);
                    e.src = t.src;
                    e.expert = t.expert;
                    e.rb = t.row_block;
                    e.cb = t.col_block;
                    e.value = rows;
                }
                {
                    TraceEvent& e = tb.emit(ev::enqueue);
                    e.task_type = to_string(t.type);
                    e.src = t.src;
                    e.expert = t.expert;
                    e.rb = t.row_block;
                    e.cb = t.col_block;
                }
                q.sub_doorbell.fetch_add(1, std::memory_order_release);
            }
        }
        if (!progressed) std::this_thread::yield();
    }
    tb.emit(ev::exit_);
}

// ---- scheduler --------------------------------------------------------------

inline void scheduler_run(DeviceCtx& dev, TraceBuffer& tb) {
    GroupCtx& g = *dev.group;
    TaskQueues& q = *dev.queues;
    const std::int32_t n_procs = static_cast<std::int32_t>(dev.mailbox.size());

    std::int64_t consumed = 0;
    std::int64_t scheduled = 0;
    std::deque<std::int64_t> fifo;              // published, unassigned slot indices
    std::deque<std::int32_t> rq;                // ready queue of idle processor ids
    std::vector<std::int64_t> proc_task(static_cast<std::size_t>(n_procs), -1);
    std::vector<std::uint64_t> inflight(static_cast<std::size_t>(g.grid.col_blocks_embed), 0);

    for (std::int32_t p = 0; p < n_procs; ++p) {
        dev.idle[static_cast<std::size_t>(p)].store(0, std::memory_order_relaxed);
        rq.push_back(p);  // populate ready queue with processor ids
    }

    auto assignable = [&](const TaskDescriptor& t) {
        if (t.type != TaskType::combine) return true;
        return (inflight[static_cast<std::size_t>(t.col_block)] & t.row_mask) == 0;
    };

    tb.emit(ev::spawn);
    std::int64_t ttb = q.task_bound.load(std::memory_order_acquire);
    while (scheduled < ttb && !g.fault.load(std::memory_order_relaxed)) {
        bool moved = false;

        // sweep doorbells
        const std::int64_t published = q.sub_doorbell.load(std::memory_order_acquire) +
                                       q.proc_doorbell.load(std::memory_order_acquire);
        while (consumed < published) {
            while (!q.ready[static_cast<std::size_t>(consumed)].load(std::memory_order_acquire)) {
                if (g.fault.load(std::memory_order_relaxed)) return;
                std::this_thread::yield();
            }
            fifo.push_back(consumed);
            ++consumed;
            moved = true;
        }

        // repopulate ready queue with processors that went idle
        for (std::int32_t p = 0; p < n_procs; ++p) {
            if (dev.idle[static_cast<std::size_t>(p)].exchange(0, std::memory_order_acquire)) {
                const std::int64_t done = proc_task[static_cast<std::size_t>(p)];
                if (done >= 0) {
                    const TaskDescriptor& t = q.slots[static_cast<std::size_t>(done)];
                    if (t.type == TaskType::combine)
                        inflight[static_cast<std::size_t>(t.col_block)] &= ~t.row_mask;
                    proc_task[static_cast<std::size_t>(p)] = -1;
                }
                rq.push_back(p);
                moved = true;
            }
        }

        // assign: first assignable task in queue order to the next ready id
        while (!rq.empty()) {
            std::int64_t pick = -1;
            for (std::size_t i = 0; i < fifo.size(); ++i) {
                if (assignable(q.slots[static_cast<std::size_t>(fifo[i])])) {
                    pick = static_cast<std::int64_t>(i);
                    break;
                }
            }
            if (pick < 0) break;
            const std::int64_t slot = fifo[static_cast<std::size_t>(pick)];
            fifo.erase(fifo.begin() + pick);
            const TaskDescriptor& t = q.slots[static_cast<std::size_t>(slot)];
            const std::int32_t p = rq.front();
            rq.pop_front();
            if (t.type == TaskType::combine)
                inflight[static_cast<std::size_t>(t.col_block)] |= t.row_mask;
            proc_task[static_cast<std::size_t>(p)] = slot;
            dev.mailbox[static_cast<std::size_t>(p)].store(slot, std::memory_order_release);
            ++scheduled;
            q.scheduled.store(scheduled, std::memory_order_release);
            TraceEvent& e = tb.emit(ev::assign);
            e.task_type = to_string(t.type);
            e.src = t.src;
            e.expert = t.expert;
            e.rb = t.row_block;
            e.cb = t.col_block;
            e.peer = p;
            moved = true;
        }

        // work conservation: a ready processor must never coexist with an
        // assignable pending task at the end of a sweep
        if (!rq.empty()) {
            for (std::int64_t slot : fifo) {
                if (assignable(q.slots[static_cast<std::size_t>(slot)])) {
                    tb.emit(ev::conservation_violation);
                    g.raise("scheduler idle-while-pending on device " + std::to_string(dev.id));
                    return;
                }
            }
        }

        ttb = q.task_bound.load(std::memory_order_acquire);
        if (!moved) std::this_thread::yield();
    }

    // drain: interrupt subscriber, then processors (Alg. 3 epilogue)
    dev.interrupt_sub.store(1, std::memory_order_release);
    for (std::int32_t p = 0; p < n_procs; ++p) {
        while (dev.mailbox[static_cast<std::size_t>(p)].load(std::memory_order_acquire) != kMailEmpty) {
            if (g.fault.load(std::memory_order_relaxed)) return;
            std::this_thread::yield();
        }
        dev.mailbox[static_cast<std::size_t>(p)].store(kMailInterrupt, std::memory_order_release);
    }
    {
        TraceEvent& e = tb.emit(ev::interrupt);
        e.value = scheduled;
    }
    dev.stats.scheduled_final = scheduled;
    tb.emit(ev::exit_);
}

// ---- processor --------------------------------------------------------------

inline void execute_gemm0(DeviceCtx& dev, const TaskDescriptor& t) {
    GroupCtx& g = *dev.group;
    const std::int64_t h = g.spec.embed_dim;
    const std::int64_t d_ffn = g.cfg->ffn_dim;
    const ExpertParams& ep = dev.experts[t.expert];
    const std::int64_t nc = std::min(g.grid.tile_cols, d_ffn - t.col_block * g.grid.tile_cols);

    ConstView a{g.fabric->heap(dev.id) + t.in_offset, t.rows, h, h};
    ConstView b = subview(view_of(ep.w1), 0, t.col_block * g.grid.tile_cols, h, nc);
    MutView out{dev.scratch.data() + t.out_offset, t.rows, nc, d_ffn};
    std::span<const float> bias(ep.b1.data() + t.col_block * g.grid.tile_cols,
                                static_cast<std::size_t>(nc));
    fused_gemm_epilogue(a, b, bias, t.phi, out);
}

inline void execute_gemm1(DeviceCtx& dev, const TaskDescriptor& t, std::vector<float>& tile,
                          TraceBuffer& tb) {
    GroupCtx& g = *dev.group;
    const std::int64_t h = g.spec.embed_dim;
    const std::int64_t d_ffn = g.cfg->ffn_dim;
    const ExpertParams& ep = dev.experts[t.expert];
    const std::int64_t nc = std::min(g.grid.tile_cols, h - t.col_block * g.grid.tile_cols);

    ConstView a{dev.scratch.data() + t.in_offset, t.rows, d_ffn, d_ffn};
    ConstView b = subview(view_of(ep.w2), 0, t.col_block * g.grid.tile_cols, d_ffn, nc);
    tile.resize(static_cast<std::size_t>(t.rows * nc));
    MutView out{tile.data(), t.rows, nc, nc};
    std::span<const float> bias(ep.b2.data() + t.col_block * g.grid.tile_cols,
                                static_cast<std::size_t>(nc));
    fused_gemm_epilogue(a, b, bias, Activation::identity, out);

    // send the finished tile home with a per-tile signal
    const std::int64_t origin = t.src;
    WriteDescriptor w{dev.id, origin,
                      {dev.id, Round::combine, kStageIn, t.expert, t.row_block * g.grid.tile_rows}};
    const std::int64_t flag = g.fabric->combine_flag(dev.id, t.expert, t.row_block, t.col_block);
    g.fabric->put_with_signal(w, ConstView{tile.data(), t.rows, nc, nc},
                              t.col_block * g.grid.tile_cols, FlagId{Round::combine, flag},
                              Signal{static_cast<std::uint64_t>(t.rows), Round::combine});
    TraceEvent& e = tb.emit(ev::tile_put);
    e.task_type = to_string(TaskType::gemm1);
    e.src = t.src;
    e.expert = t.expert;
    e.rb = t.row_block;
    e.cb = t.col_block;
    e.peer = static_cast<std::int32_t>(origin);
    e.value = t.rows * nc * 4;
}

inline void execute_combine(DeviceCtx& dev, const TaskDescriptor& t) {
    GroupCtx& g = *dev.group;
    const std::int64_t h = g.spec.embed_dim;
    const std::int64_t nc = std::min(g.grid.tile_cols, h - t.col_block * g.grid.tile_cols);
    const std::int64_t e_global = static_cast<std::int64_t>(t.src) * g.spec.local_experts + t.expert;

    ConstView tile{g.fabric->heap(dev.id) + t.in_offset, t.rows, nc, h};
    std::span<const SlotMap> slots(
        &dev.gate.slot(e_global, static_cast<std::int64_t>(t.row_block) * g.grid.tile_rows),
        static_cast<std::size_t>(t.rows));
    combine_tile(tile, slots, t.col_block * g.grid.tile_cols, dev.output);
}

inline void processor_run(DeviceCtx& dev, std::int32_t pid, TraceBuffer& tb) {
    GroupCtx& g = *dev.group;
    TaskQueues& q = *dev.queues;
    std::atomic<std::int64_t>& mail = dev.mailbox[static_cast<std::size_t>(pid)];
    std::vector<float> tile;
    tile.reserve(static_cast<std::size_t>(g.grid.tile_rows * g.grid.tile_cols));

    tb.emit(ev::spawn);
    while (!g.fault.load(std::memory_order_relaxed)) {
        const std::int64_t m = mail.load(std::memory_order_acquire);
        if (m == kMailEmpty) {
            std::this_thread::yield();
            continue;
        }
        if (m == kMailInterrupt) break;
        mail.store(kMailEmpty, std::memory_order_relaxed);
        const TaskDescriptor t = q.slots[static_cast<std::size_t>(m)];

        const std::uint64_t t0 = tb.now();
        switch (t.type) {
            case TaskType::gemm0: {
                execute_gemm0(dev, t);
                dev.executed_gemm.fetch_add(1, std::memory_order_acq_rel);
                // completion counter gates the row block's GEMM1 enqueue
                const std::int64_t key =
                    (static_cast<std::int64_t>(t.src) * g.spec.local_experts + t.expert) *
                        g.grid.row_blocks +
                    t.row_block;
                const std::int32_t done =
                    dev.g0_done[static_cast<std::size_t>(key)].fetch_add(1, std::memory_order_acq_rel) + 1;
                if (done == static_cast<std::int32_t>(g.grid.col_blocks_ffn)) {
                    std::int64_t count = 0;
                    for (std::int64_t cb = 0; cb < g.grid.col_blocks_embed; ++cb) {
                        TaskDescriptor t1;
                        t1.type = TaskType::gemm1;
                        t1.star = BinaryOp::matmul;
                        t1.phi = Activation::identity;
                        t1.src = t.src;
                        t1.expert = t.expert;
                        t1.row_block = t.row_block;
                        t1.col_block = static_cast<std::int32_t>(cb);
                        t1.rows = t.rows;
                        t1.in_offset = g.scratch_base(t.src, t.expert) +
                                       static_cast<std::int64_t>(t.row_block) * g.grid.tile_rows *
                                           g.cfg->ffn_dim;
                        t1.out_offset = 0;
                        q.append(t1);
                        TraceEvent& qe = tb.emit(ev::enqueue);
                        qe.task_type = to_string(t1.type);
                        qe.src = t1.src;
                        qe.expert = t1.expert;
                        qe.rb = t1.row_block;
                        qe.cb = t1.col_block;
                        ++count;
                    }
                    q.proc_doorbell.fetch_add(count, std::memory_order_release);  // notify scheduler
                }
                break;
            }
            case TaskType::gemm1:
                execute_gemm1(dev, t, tile, tb);
                dev.executed_gemm.fetch_add(1, std::memory_order_acq_rel);
                break;
            case TaskType::combine:
                execute_combine(dev, t);
                break;
        }
        TraceEvent& e = tb.emit_span(ev::exec, t0);
        e.task_type = to_string(t.type);
        e.src = t.src;
        e.expert = t.expert;
        e.rb = t.row_block;
        e.cb = t.col_block;
        e.peer = pid;

        dev.executed_total.fetch_add(1, std::memory_order_acq_rel);
        dev.idle[static_cast<std::size_t>(pid)].store(1, std::memory_order_release);
    }
    tb.emit(ev::exit_);
}

}  // namespace detail

// ---- forward ---------------------------------------------------------------

/// One persistent launch per device: gate -> dispatch -> expert FFN ->
/// combine with no phase barriers (overlapped mode). Returns the output
/// shards plus the full audit surface (trace, byte matrices, task stats).
inline ForwardResult forward(const MoeConfig& cfg, const std::vector<TokenMatrix>& shards,
                             const ModelWeights& model, const ForwardOptions& opts = {}) {
    cfg.validate();
    if (static_cast<std::int64_t>(shards.size()) != cfg.devices)
        throw ConfigError("forward: shard count != devices");
    if (static_cast<std::int64_t>(model.experts.size()) != cfg.experts_total)
        throw ConfigError("forward: expert parameter count != experts_total");
    if (opts.processors < 1) throw ConfigError("forward: need at least one processor");

    using namespace detail;
    GroupCtx g;
    g.cfg = &cfg;
    g.model = &model;
    g.spec = LayoutSpec::from_config(cfg);
    g.grid = TileGrid::from_config(cfg);
    g.fabric = std::make_unique<Fabric>(g.spec, g.grid);
    g.opts = opts;
    g.epoch = Clock::now();
    if (opts.mode == ScheduleMode::sequential)
        g.barrier = std::make_unique<SpinBarrier>(static_cast<std::int32_t>(cfg.devices), g.fault);

    const std::int64_t e_local = g.spec.local_experts;
    const std::int64_t qcap = cfg.devices * e_local * g.grid.row_blocks *
                              (g.grid.col_blocks_ffn + 2 * g.grid.col_blocks_embed);
    const std::int64_t g0slots = cfg.devices * e_local * g.grid.row_blocks;

    for (std::int64_t d = 0; d < cfg.devices; ++d) {
        auto dev = std::make_unique<DeviceCtx>(opts.processors, qcap, g0slots);
        dev->id = static_cast<std::int32_t>(d);
        dev->cfg = &cfg;
        dev->group = &g;
        dev->input = shards[static_cast<std::size_t>(d)];
        if (dev->input.rows != cfg.tokens_per_device || dev->input.cols != cfg.embed_dim)
            throw ConfigError("forward: shard " + std::to_string(d) + " is not S x H");
        dev->output = TokenMatrix(cfg.tokens_per_device, cfg.embed_dim);
        dev->experts = model.experts.data() + d * e_local;
        dev->scratch.assign(
            static_cast<std::size_t>(cfg.devices * e_local * g.spec.slot_capacity * cfg.ffn_dim),
            0.0f);
        for (std::size_t i = 0; i < dev->tracebuf.size(); ++i) {
            std::string name = i == 0 ? "driver" : i == 1 ? "sub" : i == 2 ? "sched"
                                                  : ("proc" + std::to_string(i - 3));
            dev->tracebuf[i].bind(dev->id, name.c_str(), g.epoch);
        }
        g.devices.push_back(std::move(dev));
    }

    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(cfg.devices));
    std::vector<std::thread> drivers;
    drivers.reserve(static_cast<std::size_t>(cfg.devices));

    for (std::int64_t d = 0; d < cfg.devices; ++d) {
        drivers.emplace_back([&g, &cfg, &model, &errors, d] {
            DeviceCtx& dev = *g.devices[static_cast<std::size_t>(d)];
            TraceBuffer& tb = dev.tracebuf[0];
            try {
                tb.emit(ev::spawn);
                dev.gate = gate_forward(dev.input, model.gate, cfg);
                dev.manifest = dispatch_manifest(dev.gate, cfg);
                tb.emit(ev::gate_done).value = dev.manifest.total_routed();

                // seed the bound: worst case for GEMM parts, exact for the
                // locally-known combine part, before the first put can
                // trigger any remote echo
                std::int64_t bound = initial_task_bound(cfg, g.spec, g.grid);
                dev.stats.bound_initial = bound;
                std::int64_t realized_combine = 0;
                for (const auto& entries : dev.manifest.per_device)
                    for (const auto& m : entries)
                        realized_combine += combine_tiles_for_rows(m.count, g.grid);
                bound += realized_combine - cfg.topk * ceil_div(cfg.tokens_per_device, g.grid.tile_rows) *
                                                g.grid.col_blocks_embed;
                dev.queues->task_bound.store(bound, std::memory_order_release);
                tb.emit(ev::bound_init).value = bound;

                // single persistent launch of the worker group
                dev.launches.fetch_add(1, std::memory_order_acq_rel);
                std::vector<std::thread> workers;
                workers.emplace_back([&dev] { subscriber_run(dev, dev.tracebuf[1]); });
                for (std::int32_t p = 0; p < g.opts.processors; ++p)
                    workers.emplace_back([&dev, p] { processor_run(dev, p, dev.tracebuf[static_cast<std::size_t>(p) + 3]); });
                std::thread sched([&dev] { scheduler_run(dev, dev.tracebuf[2]); });

                if (g.opts.mode == ScheduleMode::overlapped)
                    dev.phase.store(2, std::memory_order_release);

                dispatch_tokens(dev, tb);

                if (g.opts.mode == ScheduleMode::sequential) {
                    tb.emit(ev::barrier_enter).value = 0;
                    g.barrier->arrive_and_wait();  // all dispatches done
                    tb.emit(ev::barrier_exit).value = 0;
                    dev.phase.store(1, std::memory_order_release);
                    // wait for local expert compute to drain
                    const std::int64_t all = cfg.devices * g.spec.local_experts;
                    while (dev.signals_seen.load(std::memory_order_acquire) < all ||
                           dev.executed_gemm.load(std::memory_order_acquire) <
                               dev.realized_gemm.load(std::memory_order_acquire)) {
                        if (g.fault.load(std::memory_order_relaxed))
                            throw RuntimeFault("fault during compute phase");
                        std::this_thread::yield();
                    }
                    tb.emit(ev::barrier_enter).value = 1;
                    g.barrier->arrive_and_wait();  // all expert compute done
                    tb.emit(ev::barrier_exit).value = 1;
                    dev.phase.store(2, std::memory_order_release);
                }

                sched.join();
                for (auto& w : workers) w.join();

                // accounting checks
                const std::int64_t bound_final = dev.queues->task_bound.load();
                const std::int64_t scheduled = dev.queues->scheduled.load();
                const std::int64_t executed = dev.executed_total.load();
                if (!g.fault.load() && (bound_final != scheduled || scheduled != executed))
                    throw RuntimeFault("task accounting mismatch on device " + std::to_string(d) +
                                       ": bound=" + std::to_string(bound_final) +
                                       " scheduled=" + std::to_string(scheduled) +
                                       " executed=" + std::to_string(executed));
                dev.stats.bound_final = bound_final;
                dev.stats.enqueued = dev.queues->tail.load();
                dev.stats.executed = executed;
                dev.stats.launches = dev.launches.load();
                tb.emit(ev::exit_);
            } catch (...) {
                errors[static_cast<std::size_t>(d)] = std::current_exception();
                g.raise("device " + std::to_string(d) + " failed");
                // release anything still parked on queues or barriers
                dev.interrupt_sub.store(1, std::memory_order_release);
                for (auto& m : dev.mailbox) m.store(kMailInterrupt, std::memory_order_release);
            }
        });
    }

    // deadlock watchdog: no global progress within the poll budget is a fault
    {
        std::uint64_t last = ~0ull;
        auto last_change = Clock::now();
        while (true) {
            std::uint64_t progress = 0;
            bool done = true;
            for (const auto& dev : g.devices) {
                progress += static_cast<std::uint64_t>(dev->executed_total.load(std::memory_order_relaxed));
                progress += static_cast<std::uint64_t>(dev->queues->tail.load(std::memory_order_relaxed));
                progress += static_cast<std::uint64_t>(dev->signals_seen.load(std::memory_order_relaxed));
                progress += static_cast<std::uint64_t>(dev->queues->scheduled.load(std::memory_order_relaxed));
                if (dev->launches.load(std::memory_order_acquire) == 0 ||
                    dev->queues->scheduled.load(std::memory_order_acquire) !=
                        dev->queues->task_bound.load(std::memory_order_acquire))
                    done = false;
            }
            if (done || g.fault.load(std::memory_order_relaxed)) break;
            if (progress != last) {
                last = progress;
                last_change = Clock::now();
            } else if (std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - last_change)
                           .count() > opts.deadlock_budget_ms) {
                g.raise("deadlock budget exceeded; " + g.dump());
                for (auto& dev : g.devices) {
                    dev->interrupt_sub.store(1, std::memory_order_release);
                    for (auto& m : dev->mailbox) m.store(detail::kMailInterrupt, std::memory_order_release);
                }
                break;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(1));
        }
    }

    for (auto& t : drivers) t.join();
    const std::uint64_t makespan = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - g.epoch).count());

    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    if (g.fault.load()) throw RuntimeFault(g.fault_reason + "; " + g.dump());

    ForwardResult res;
    res.makespan_ns = makespan;
    res.bytes = g.fabric->payload_bytes();
    res.bytes_padded = g.fabric->padded_baseline_bytes();
    std::vector<TraceBuffer*> bufs;
    for (auto& dev : g.devices) {
        res.outputs.push_back(std::move(dev->output));
        res.gates.push_back(std::move(dev->gate));
        res.manifests.push_back(std::move(dev->manifest));
        TaskStats st = dev->stats;
        for (const auto& buf : dev->tracebuf)
            for (const auto& e : buf.events())
                if (std::string_view(e.event) == ev::exec) {
                    const std::string_view ty(e.task_type);
                    if (ty == "gemm0") ++st.gemm0;
                    else if (ty == "gemm1") ++st.gemm1;
                    else ++st.combine;
                }
        res.stats.push_back(st);
        for (auto& buf : dev->tracebuf) bufs.push_back(&buf);
    }
    res.trace = merge_traces(bufs);
    return res;
}

}  // namespace moefabric
