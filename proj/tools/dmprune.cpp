#include <iostream>

#include "dmprune/cli.hpp"

int main(int argc, char** argv) {
  return dmprune::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
