#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace rime {

/// Keeps large matrix temporaries on the heap instead of fresh mmap'd pages.
/// The define-by-run graph allocates and frees many buffers per step and the
/// default glibc thresholds turn each of them into page faults.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
}

}  // namespace rime
