#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sxda {

/// Keeps large freed blocks in the heap instead of returning them to the OS.
/// Training allocates and frees the same multi-megabyte buffers every step,
/// and fresh mappings cost a page fault per 4 KiB touched. No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace sxda
