#include "selflabel/rng.hpp"

#include <sstream>

#include "selflabel/domain.hpp"

namespace selflabel {

std::string serialize_rng(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

Rng deserialize_rng(const std::string& state) {
  std::istringstream in(state);
  Rng rng;
  in >> rng;
  if (!in) throw ParseError("corrupt random-generator state");
  return rng;
}

}  // namespace selflabel
