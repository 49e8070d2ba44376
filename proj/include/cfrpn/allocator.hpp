#pragma once

namespace cfrpn {

/// Keeps freed tensor buffers in the heap instead of returning them to the OS after every
/// step. Training allocates and frees the same large blocks repeatedly, and on glibc the
/// default thresholds turn each of those into fresh page faults. No-op elsewhere.
void configure_allocator();

}  // namespace cfrpn
