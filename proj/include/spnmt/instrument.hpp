#pragma once

#include <atomic>
#include <cstdint>

namespace spnmt::instrument {

// Global pass accounting. The training loop asserts its per-step budget
// (M+1 forwards, 1 backward, 0 decodes) from snapshots of these.
struct Counters {
    std::atomic<std::int64_t> forwards{0};
    std::atomic<std::int64_t> backwards{0};
    std::atomic<std::int64_t> decodes{0};
};

inline Counters& counters() {
    static Counters c;
    return c;
}

struct Snapshot {
    std::int64_t forwards = 0;
    std::int64_t backwards = 0;
    std::int64_t decodes = 0;

    static Snapshot now() {
        auto& c = counters();
        return {c.forwards.load(), c.backwards.load(), c.decodes.load()};
    }

    Snapshot operator-(const Snapshot& o) const {
        return {forwards - o.forwards, backwards - o.backwards, decodes - o.decodes};
    }
};

}  // namespace spnmt::instrument
