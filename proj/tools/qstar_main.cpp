#include "qstar/cli.hpp"

#include <iostream>
#include <string>
#include <vector>

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return qstar::run_cli(args, std::cout, std::cerr);
}
