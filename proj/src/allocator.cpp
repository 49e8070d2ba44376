#include "cfrpn/allocator.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cfrpn {

void configure_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace cfrpn
