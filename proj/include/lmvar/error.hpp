#pragma once

#include <stdexcept>
#include <string>

namespace lmvar {

// Every failure surfaced by the library is an Error carrying a readable message.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace lmvar
