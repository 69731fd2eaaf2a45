#pragma once

#include <atomic>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace lplm::core {

// Persistent worker pool for data-parallel loops. Work items write disjoint
// outputs and each output element is computed with a fixed summation order,
// so results are bit-identical for any worker count.
class ThreadPool {
public:
    static ThreadPool& instance();

    // 0 restores the hardware default. Takes effect immediately.
    static void set_num_threads(int n);
    int num_threads() const { return static_cast<int>(workers_.size()) + 1; }

    // Runs fn(begin, end) over a partition of [0, n). Blocks until done.
    // The calling thread participates.
    void parallel_for(int n, const std::function<void(int, int)>& fn);

    ~ThreadPool();

private:
    explicit ThreadPool(int threads);
    void worker_loop(int idx);

    struct Job {
        const std::function<void(int, int)>* fn = nullptr;
        int n = 0;
        int chunks = 0;
        std::atomic<int> next_chunk{0};
        std::atomic<int> active{0};
    };

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_work_;
    std::condition_variable cv_done_;
    Job* job_ = nullptr;
    uint64_t job_id_ = 0;
    bool stop_ = false;
};

inline void parallel_for(int n, const std::function<void(int, int)>& fn) {
    ThreadPool::instance().parallel_for(n, fn);
}

}  // namespace lplm::core
