#pragma once

#include <cstddef>
#include <memory>
#include <new>

namespace regeval {

// Per-thread accounting of bytes held by volume/field buffers. A registration
// job runs on one thread, so its peak is read from the thread that ran it.
class MemoryTracker {
 public:
  static MemoryTracker& local() {
    thread_local MemoryTracker tracker;
    return tracker;
  }

  void on_alloc(std::size_t bytes) {
    if (budget_ != 0 && current_ + bytes > budget_) throw std::bad_alloc();
    current_ += bytes;
    if (current_ > peak_) peak_ = current_;
  }
  void on_free(std::size_t bytes) { current_ -= bytes; }

  std::size_t current() const { return current_; }
  std::size_t peak() const { return peak_; }
  void reset_peak() { peak_ = current_; }
  /// Tracked allocations beyond `bytes` throw std::bad_alloc; 0 disables.
  void set_budget(std::size_t bytes) { budget_ = bytes; }
  std::size_t budget() const { return budget_; }

 private:
  std::size_t current_ = 0;
  std::size_t peak_ = 0;
  std::size_t budget_ = 0;
};

template <typename T>
struct TrackedAllocator {
  using value_type = T;

  TrackedAllocator() noexcept = default;
  template <typename U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    MemoryTracker::local().on_alloc(n * sizeof(T));
    try {
      return std::allocator<T>{}.allocate(n);
    } catch (...) {
      MemoryTracker::local().on_free(n * sizeof(T));
      throw;
    }
  }
  void deallocate(T* p, std::size_t n) noexcept {
    MemoryTracker::local().on_free(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  template <typename U>
  bool operator==(const TrackedAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace regeval
