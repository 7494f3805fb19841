#pragma once

#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace storydiff {

// Input/config problems. The CLI maps these to exit code 2.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values, diverging training, ill-conditioned covariances. Exit code 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 streams with Box-Muller normals; all sampling
// in the project goes through this so runs are reproducible from the seed
// alone, independent of platform RNG library details.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // burn two outputs so nearby seeds decorrelate
        splitmix64(state_);
        splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Independent child stream fully determined by (current state, tag).
    Rng fork(uint64_t tag) const {
        uint64_t s = state_ ^ (0xA24BAED4963EE407ull * (tag + 1));
        return Rng(s);
    }

  private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// FNV-1a hashing, used for config hashes and frozen-weight checks.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xCBF29CE484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xCBF29CE484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::string to_hex(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

// ---------------------------------------------------------------------------
// Two-lane work splitting: one persistent worker plus the calling thread.
// Ranges are fixed halves, so per-element accumulation order never depends
// on scheduling. Nested calls run inline on the current thread.
// ---------------------------------------------------------------------------

namespace detail {
inline bool& in_lane_flag() {
    thread_local bool flag = false;
    return flag;
}
}  // namespace detail

class WorkerLane {
  public:
    static WorkerLane& instance() {
        static WorkerLane lane;
        return lane;
    }

    void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn, int64_t min_split = 2) {
        if (n <= 0) return;
        if (n < min_split || detail::in_lane_flag() || !worker_.joinable()) {
            fn(0, n);
            return;
        }
        int64_t split = n / 2;
        {
            std::unique_lock<std::mutex> lk(mu_);
            job_ = [&fn, split] {
                detail::in_lane_flag() = true;
                fn(0, split);
                detail::in_lane_flag() = false;
            };
            job_ready_ = true;
            job_done_ = false;
        }
        cv_.notify_all();
        detail::in_lane_flag() = true;
        fn(split, n);
        detail::in_lane_flag() = false;
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [this] { return job_done_; });
    }

    ~WorkerLane() {
        {
            std::unique_lock<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        if (worker_.joinable()) worker_.join();
    }

    WorkerLane(const WorkerLane&) = delete;
    WorkerLane& operator=(const WorkerLane&) = delete;

  private:
    WorkerLane() {
        if (std::thread::hardware_concurrency() >= 2) {
            worker_ = std::thread([this] { loop(); });
        }
    }

    void loop() {
        for (;;) {
            std::function<void()> job;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [this] { return stop_ || job_ready_; });
                if (stop_) return;
                job = std::move(job_);
                job_ready_ = false;
            }
            job();
            {
                std::unique_lock<std::mutex> lk(mu_);
                job_done_ = true;
            }
            cv_.notify_all();
        }
    }

    std::thread worker_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::function<void()> job_;
    bool job_ready_ = false;
    bool job_done_ = true;
    bool stop_ = false;
};

inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn,
                         int64_t min_split = 2) {
    WorkerLane::instance().run(n, fn, min_split);
}

}  // namespace storydiff
