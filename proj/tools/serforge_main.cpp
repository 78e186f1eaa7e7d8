#include <string>
#include <vector>

#include "serforge/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return serforge::cli::run(args);
}
