#pragma once

#include <iosfwd>

namespace neuroadapt {

// Quick self-check of the installed build: finite-difference gradients,
// brute-force AUC, T3A/No-TTA agreement at init, checkpoint round trip and
// RNG determinism. Prints one line per check; returns the failure count.
int run_selftest(std::ostream& os);

}  // namespace neuroadapt
