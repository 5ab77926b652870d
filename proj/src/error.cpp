#include "d2dmoe/error.hpp"

namespace d2dmoe {

int exit_code(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  if (dynamic_cast<const FormatError*>(&e)) return 4;
  return 2;
}

}  // namespace d2dmoe
