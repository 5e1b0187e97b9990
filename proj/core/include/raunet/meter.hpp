#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

namespace raunet {

// Counts live scalar allocations (elements, not bytes) made through
// MeterAllocator while a scope is active. Used to verify the attention
// kernel's workspace bound without guessing at allocator internals.
class AllocMeter {
public:
    void on_alloc(std::size_t n) {
        live_ += static_cast<std::int64_t>(n);
        if (live_ > peak_) peak_ = live_;
        if (static_cast<std::int64_t>(n) > largest_block_)
            largest_block_ = static_cast<std::int64_t>(n);
    }
    void on_free(std::size_t n) { live_ -= static_cast<std::int64_t>(n); }

    std::int64_t live() const { return live_; }
    std::int64_t peak() const { return peak_; }
    std::int64_t largest_block() const { return largest_block_; }

    static AllocMeter*& active() {
        thread_local AllocMeter* current = nullptr;
        return current;
    }

private:
    std::int64_t live_ = 0;
    std::int64_t peak_ = 0;
    std::int64_t largest_block_ = 0;
};

// RAII activation of a meter on the current thread.
class MeterScope {
public:
    explicit MeterScope(AllocMeter& m) : prev_(AllocMeter::active()) {
        AllocMeter::active() = &m;
    }
    ~MeterScope() { AllocMeter::active() = prev_; }
    MeterScope(const MeterScope&) = delete;
    MeterScope& operator=(const MeterScope&) = delete;

private:
    AllocMeter* prev_;
};

template <typename T>
struct MeterAllocator {
    using value_type = T;

    MeterAllocator() = default;
    template <typename U>
    MeterAllocator(const MeterAllocator<U>&) {}

    T* allocate(std::size_t n) {
        if (auto* m = AllocMeter::active()) m->on_alloc(n);
        return std::allocator<T>{}.allocate(n);
    }
    void deallocate(T* p, std::size_t n) {
        if (auto* m = AllocMeter::active()) m->on_free(n);
        std::allocator<T>{}.deallocate(p, n);
    }

    template <typename U>
    bool operator==(const MeterAllocator<U>&) const { return true; }
};

// Metered vector: the storage type for tensor data and kernel scratch.
template <typename T>
using MVec = std::vector<T, MeterAllocator<T>>;

}  // namespace raunet
