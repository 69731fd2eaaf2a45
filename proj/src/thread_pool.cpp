#include "lplm/thread_pool.hpp"

#include <algorithm>
#include <memory>

namespace lplm::core {

namespace {
std::unique_ptr<ThreadPool>& pool_slot() {
    static std::unique_ptr<ThreadPool> slot;
    return slot;
}
std::mutex& pool_mu() {
    static std::mutex mu;
    return mu;
}
int requested_threads = 0;  // 0 = hardware default
thread_local bool in_worker = false;
}  // namespace

ThreadPool& ThreadPool::instance() {
    std::lock_guard<std::mutex> lk(pool_mu());
    auto& slot = pool_slot();
    if (!slot) {
        int n = requested_threads;
        if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
        if (n <= 0) n = 1;
        slot.reset(new ThreadPool(n));
    }
    return *slot;
}

void ThreadPool::set_num_threads(int n) {
    std::lock_guard<std::mutex> lk(pool_mu());
    requested_threads = n;
    pool_slot().reset();  // rebuilt lazily with the new count
}

ThreadPool::ThreadPool(int threads) {
    int extra = std::max(0, threads - 1);
    workers_.reserve(static_cast<size_t>(extra));
    for (int i = 0; i < extra; ++i) {
        workers_.emplace_back([this, i] { worker_loop(i); });
    }
}

ThreadPool::~ThreadPool() {
    {
        std::lock_guard<std::mutex> lk(mu_);
        stop_ = true;
    }
    cv_work_.notify_all();
    for (auto& w : workers_) w.join();
}

void ThreadPool::worker_loop(int) {
    uint64_t seen = 0;
    for (;;) {
        Job* job = nullptr;
        {
            std::unique_lock<std::mutex> lk(mu_);
            cv_work_.wait(lk, [&] { return stop_ || job_id_ != seen; });
            if (stop_) return;
            seen = job_id_;
            job = job_;
            if (job) job->active.fetch_add(1, std::memory_order_relaxed);
        }
        if (!job) continue;
        in_worker = true;
        const int chunk = (job->n + job->chunks - 1) / job->chunks;
        for (;;) {
            int c = job->next_chunk.fetch_add(1, std::memory_order_relaxed);
            if (c >= job->chunks) break;
            int b = c * chunk;
            int e = std::min(job->n, b + chunk);
            (*job->fn)(b, e);
        }
        in_worker = false;
        {
            std::lock_guard<std::mutex> lk(mu_);
            job->active.fetch_sub(1, std::memory_order_relaxed);
        }
        cv_done_.notify_all();
    }
}

void ThreadPool::parallel_for(int n, const std::function<void(int, int)>& fn) {
    if (n <= 0) return;
    // nested calls from a worker run inline
    if (workers_.empty() || n == 1 || in_worker) {
        fn(0, n);
        return;
    }
    Job job;
    job.fn = &fn;
    job.n = n;
    job.chunks = std::min(n, (num_threads()) * 4);
    {
        std::lock_guard<std::mutex> lk(mu_);
        job_ = &job;
        ++job_id_;
    }
    cv_work_.notify_all();
    const int chunk = (job.n + job.chunks - 1) / job.chunks;
    for (;;) {
        int c = job.next_chunk.fetch_add(1, std::memory_order_relaxed);
        if (c >= job.chunks) break;
        int b = c * chunk;
        int e = std::min(job.n, b + chunk);
        fn(b, e);
    }
    {
        std::unique_lock<std::mutex> lk(mu_);
        job_ = nullptr;
        cv_done_.wait(lk, [&] { return job.active.load(std::memory_order_relaxed) == 0; });
    }
}

}  // namespace lplm::core
