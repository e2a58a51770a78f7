#pragma once

#include <cstdint>
#include <functional>

namespace fmdt {

// Worker cap for data-parallel loops; 1 means fully serial. Results never
// depend on the cap: loop bodies write disjoint slots and reductions happen
// afterwards in index order.
void set_max_threads(int n);
int max_threads();

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& body);

}  // namespace fmdt
