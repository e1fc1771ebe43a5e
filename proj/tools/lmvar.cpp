#include <string>
#include <vector>

#include "lmvar/cli.hpp"

int main(int argc, char** argv) {
  return lmvar::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
