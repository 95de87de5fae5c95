#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace oucopula {

/// Keeps large, short-lived activation buffers on the heap instead of mapping and
/// unmapping them on every batch. Call once at program start; no-op off glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace oucopula
