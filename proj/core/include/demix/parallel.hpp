#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace demix {

/// Persistent worker pool for data-parallel loops. Work items are disjoint
/// index ranges, so results are bit-identical regardless of how chunks land
/// on threads. Pool size comes from DEMIX_THREADS or hardware_concurrency.
class ThreadPool {
public:
    static ThreadPool& instance();

    /// Runs fn(i) for i in [begin, end), partitioned into chunks.
    /// Blocks until every index is done. fn must not touch shared mutable
    /// state outside its own indices.
    void parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t)>& fn);

    int size() const { return static_cast<int>(workers_.size()) + 1; }

    ~ThreadPool();

private:
    ThreadPool();
    void worker_loop();
    bool grab_and_run();

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_work_;
    std::condition_variable cv_done_;

    const std::function<void(int64_t)>* fn_ = nullptr;
    int64_t next_ = 0;
    int64_t end_ = 0;
    int64_t chunk_ = 1;
    int64_t pending_ = 0; // indices not yet completed
    uint64_t epoch_ = 0;
    bool stop_ = false;
};

/// Convenience wrapper around the singleton pool.
inline void parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t)>& fn) {
    ThreadPool::instance().parallel_for(begin, end, fn);
}

} // namespace demix
