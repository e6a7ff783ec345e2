#pragma once

// Structured event trace. Workers append to private buffers (no
// synchronization on the hot path); the pass driver merges them afterwards.
// The trace is the audit substrate for the dependency, exactly-once, and
// work-conservation checks.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace moefabric {

namespace ev {
// event names
inline constexpr const char* spawn = "spawn";
inline constexpr const char* gate_done = "gate_done";
inline constexpr const char* bound_init = "bound_init";
inline constexpr const char* bound_correct = "bound_correct";
inline constexpr const char* dispatch_put = "dispatch_put";
inline constexpr const char* dispatch_seen = "dispatch_seen";
inline constexpr const char* combine_seen = "combine_seen";
inline constexpr const char* enqueue = "enqueue";
inline constexpr const char* assign = "assign";
inline constexpr const char* exec = "exec";
inline constexpr const char* tile_put = "tile_put";
inline constexpr const char* barrier_enter = "barrier_enter";
inline constexpr const char* barrier_exit = "barrier_exit";
inline constexpr const char* interrupt = "interrupt";
inline constexpr const char* conservation_violation = "conservation_violation";
inline constexpr const char* exit_ = "exit";
}  // namespace ev

struct TraceEvent {
    std::uint64_t t0 = 0;  // ns since pass epoch
    std::uint64_t t1 = 0;  // end time for spanning events, else 0
    std::int32_t device = -1;
    char worker[12] = {0};
    const char* event = "";
    const char* task_type = nullptr;  // "gemm0" | "gemm1" | "combine"
    std::int32_t src = -1;            // packet origin / expert owner
    std::int32_t expert = -1;         // local expert index
    std::int32_t rb = -1;             // row block
    std::int32_t cb = -1;             // col block
    std::int64_t value = -1;          // counts, bytes, bounds
    std::int32_t peer = -1;           // destination device or processor binding

    void set_worker(const char* w) {
        std::strncpy(worker, w, sizeof(worker) - 1);
        worker[sizeof(worker) - 1] = 0;
    }
    bool has_task() const { return task_type != nullptr; }
};

/// Stable identity of a task: independent of queue position or thread
/// timing, so traces from different runs are comparable.
inline std::string task_key(const TraceEvent& e) {
    std::string s(e.task_type ? e.task_type : "-");
    s += ":s" + std::to_string(e.src) + ":e" + std::to_string(e.expert) + ":r" +
         std::to_string(e.rb) + ":c" + std::to_string(e.cb);
    return s;
}

using Clock = std::chrono::steady_clock;

/// Per-worker event buffer; one per thread, merged after the pass.
class TraceBuffer {
  public:
    TraceBuffer() = default;
    void bind(std::int32_t device, const char* worker, Clock::time_point epoch) {
        device_ = device;
        epoch_ = epoch;
        std::strncpy(worker_, worker, sizeof(worker_) - 1);
    }
    std::uint64_t now() const {
        return static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - epoch_).count());
    }
    TraceEvent& emit(const char* event) {
        TraceEvent e;
        e.t0 = now();
        e.device = device_;
        e.event = event;
        e.set_worker(worker_);
        events_.push_back(e);
        return events_.back();
    }
    /// Spanning event with an explicit start time; the end time is now.
    TraceEvent& emit_span(const char* event, std::uint64_t t0) {
        TraceEvent& e = emit(event);
        e.t1 = e.t0;
        e.t0 = t0;
        return e;
    }
    std::vector<TraceEvent>& events() { return events_; }
    const std::vector<TraceEvent>& events() const { return events_; }

  private:
    std::int32_t device_ = -1;
    char worker_[12] = {0};
    Clock::time_point epoch_{};
    std::vector<TraceEvent> events_;
};

inline std::vector<TraceEvent> merge_traces(std::vector<TraceBuffer*> buffers) {
    std::vector<TraceEvent> all;
    std::size_t n = 0;
    for (auto* b : buffers) n += b->events().size();
    all.reserve(n);
    for (auto* b : buffers)
        all.insert(all.end(), b->events().begin(), b->events().end());
    std::stable_sort(all.begin(), all.end(),
                     [](const TraceEvent& a, const TraceEvent& b) { return a.t0 < b.t0; });
    return all;
}

}  // namespace moefabric
