#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fame {

/// Every graph node allocates fresh buffers, many above glibc's default mmap
/// threshold; keeping them on the heap avoids an mmap/munmap pair per node.
/// Call once at program start.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
#endif
}

}  // namespace fame
