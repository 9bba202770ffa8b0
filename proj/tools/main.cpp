#include <string>
#include <vector>

#include "chronoformer/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return chronoformer::run_cli(args);
}
