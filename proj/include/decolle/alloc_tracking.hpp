#pragma once

// Heap accounting for the memory probe.
//
// Counters are always available; they only move once exactly one translation
// unit of the program expands DECOLLE_INSTALL_ALLOCATION_HOOKS at namespace
// scope. The hooks interpose the C allocator (glibc only), so operator new,
// Eigen's aligned buffers and std containers are all counted.

#include <atomic>
#include <cstddef>

namespace decolle::alloc {

inline std::atomic<std::size_t> g_current{0};
inline std::atomic<std::size_t> g_peak{0};
inline std::atomic<std::size_t> g_allocations{0};
inline std::atomic<bool> g_hooks_active{false};

inline void on_alloc(std::size_t n) {
  const std::size_t now = g_current.fetch_add(n, std::memory_order_relaxed) + n;
  g_allocations.fetch_add(1, std::memory_order_relaxed);
  std::size_t peak = g_peak.load(std::memory_order_relaxed);
  while (now > peak && !g_peak.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
  }
  g_hooks_active.store(true, std::memory_order_relaxed);
}

inline void on_free(std::size_t n) { g_current.fetch_sub(n, std::memory_order_relaxed); }

inline std::size_t current_bytes() { return g_current.load(std::memory_order_relaxed); }
inline std::size_t peak_bytes() { return g_peak.load(std::memory_order_relaxed); }
inline std::size_t allocation_count() { return g_allocations.load(std::memory_order_relaxed); }
inline bool hooks_active() { return g_hooks_active.load(std::memory_order_relaxed); }
inline void reset_peak() { g_peak.store(g_current.load(std::memory_order_relaxed), std::memory_order_relaxed); }

}  // namespace decolle::alloc

#if defined(__GLIBC__) || defined(__linux__)
#include <malloc.h>

#include <cerrno>
#include <cstring>

extern "C" {
void* __libc_malloc(std::size_t);
void* __libc_calloc(std::size_t, std::size_t);
void* __libc_realloc(void*, std::size_t);
void* __libc_memalign(std::size_t, std::size_t);
void __libc_free(void*);
}

#define DECOLLE_INSTALL_ALLOCATION_HOOKS                                                          \
  extern "C" {                                                                                    \
  void* malloc(std::size_t n) {                                                                   \
    void* p = __libc_malloc(n);                                                                   \
    if (p) decolle::alloc::on_alloc(malloc_usable_size(p));                                       \
    return p;                                                                                     \
  }                                                                                               \
  void* calloc(std::size_t c, std::size_t n) {                                                    \
    void* p = __libc_calloc(c, n);                                                                \
    if (p) decolle::alloc::on_alloc(malloc_usable_size(p));                                       \
    return p;                                                                                     \
  }                                                                                               \
  void* realloc(void* old, std::size_t n) {                                                       \
    const std::size_t before = old ? malloc_usable_size(old) : 0;                                 \
    void* p = __libc_realloc(old, n);                                                             \
    if (p || n == 0) decolle::alloc::on_free(before);                                             \
    if (p) decolle::alloc::on_alloc(malloc_usable_size(p));                                       \
    return p;                                                                                     \
  }                                                                                               \
  void free(void* p) {                                                                            \
    if (!p) return;                                                                               \
    decolle::alloc::on_free(malloc_usable_size(p));                                               \
    __libc_free(p);                                                                               \
  }                                                                                               \
  void* memalign(std::size_t a, std::size_t n) {                                                  \
    void* p = __libc_memalign(a, n);                                                              \
    if (p) decolle::alloc::on_alloc(malloc_usable_size(p));                                       \
    return p;                                                                                     \
  }                                                                                               \
  void* aligned_alloc(std::size_t a, std::size_t n) { return memalign(a, n); }                    \
  int posix_memalign(void** out, std::size_t a, std::size_t n) {                                  \
    void* p = memalign(a, n);                                                                     \
    if (!p) return ENOMEM;                                                                        \
    *out = p;                                                                                     \
    return 0;                                                                                     \
  }                                                                                               \
  }
#else
#define DECOLLE_INSTALL_ALLOCATION_HOOKS
#endif
