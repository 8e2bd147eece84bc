#pragma once

namespace cellprompt {

/// Keeps large freed blocks inside the process heap. Training allocates and frees the same
/// multi-megabyte buffers every step; returning them to the kernel each time costs page
/// faults that dominate small-model step times. No-op outside glibc.
void tune_allocator();

} // namespace cellprompt
