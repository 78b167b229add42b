#include "demix/parallel.hpp"

#include <algorithm>
#include <cstdlib>

namespace demix {

ThreadPool& ThreadPool::instance() {
    static ThreadPool pool;
    return pool;
}

ThreadPool::ThreadPool() {
    int n = 0;
    if (const char* env = std::getenv("DEMIX_THREADS")) n = std::atoi(env);
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    for (int i = 0; i < n - 1; ++i) workers_.emplace_back([this] { worker_loop(); });
}

ThreadPool::~ThreadPool() {
    {
        std::lock_guard<std::mutex> lk(mu_);
        stop_ = true;
    }
    cv_work_.notify_all();
    for (auto& w : workers_) w.join();
}

bool ThreadPool::grab_and_run() {
    int64_t lo, hi;
    const std::function<void(int64_t)>* fn;
    {
        std::lock_guard<std::mutex> lk(mu_);
        if (fn_ == nullptr || next_ >= end_) return false;
        lo = next_;
        hi = std::min(end_, lo + chunk_);
        next_ = hi;
        fn = fn_;
    }
    for (int64_t i = lo; i < hi; ++i) (*fn)(i);
    {
        std::lock_guard<std::mutex> lk(mu_);
        pending_ -= hi - lo;
        if (pending_ == 0) cv_done_.notify_all();
    }
    return true;
}

void ThreadPool::worker_loop() {
    uint64_t seen = 0;
    for (;;) {
        {
            std::unique_lock<std::mutex> lk(mu_);
            cv_work_.wait(lk, [&] { return stop_ || (fn_ != nullptr && epoch_ != seen); });
            if (stop_) return;
            seen = epoch_;
        }
        while (grab_and_run()) {
        }
    }
}

void ThreadPool::parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t)>& fn) {
    if (end <= begin) return;
    const int64_t n = end - begin;
    if (workers_.empty() || n == 1) {
        for (int64_t i = begin; i < end; ++i) fn(i);
        return;
    }
    // shifted wrapper so workers see [0, n) offsets
    std::function<void(int64_t)> shifted = [&](int64_t i) { fn(i + begin); };
    {
        std::lock_guard<std::mutex> lk(mu_);
        fn_ = &shifted;
        next_ = 0;
        end_ = n;
        pending_ = n;
        chunk_ = std::max<int64_t>(1, n / (4 * size()));
        ++epoch_;
    }
    cv_work_.notify_all();
    while (grab_and_run()) {
    }
    {
        std::unique_lock<std::mutex> lk(mu_);
        cv_done_.wait(lk, [&] { return pending_ == 0; });
        fn_ = nullptr;
    }
}

} // namespace demix
