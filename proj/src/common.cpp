#include "pisml/common.hpp"

#include <cstdio>

#include "pisml/state.hpp"

namespace pisml {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string_view git_describe() noexcept { return PISML_GIT_DESCRIBE; }

std::string state_name(int i, int n_states) {
  if (n_states == kStateDim && i >= 0 && i < kStateDim) {
    return std::string(kStateNames[i]);
  }
  return "x" + std::to_string(i);
}

}  // namespace pisml
