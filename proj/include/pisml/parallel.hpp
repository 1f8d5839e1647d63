#pragma once

#include <functional>

namespace pisml {

/// Worker count: hardware concurrency capped by the PISML_THREADS
/// environment variable (minimum 1).
int thread_count();

/// Runs body(i) for i in [0, n). Each index is processed exactly once; the
/// caller is responsible for writing results to disjoint slots so that the
/// outcome does not depend on scheduling.
void parallel_for(int n, const std::function<void(int)>& body);

}  // namespace pisml
