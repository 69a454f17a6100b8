#include <iostream>
#include <string>
#include <vector>

#include "engram_ar/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return engram_ar::run_cli(args, std::cout, std::cerr);
}
