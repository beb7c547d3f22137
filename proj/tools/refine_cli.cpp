#include <iostream>

#include "refine/cli.hpp"

int main(int argc, char** argv) {
  return refine::run_command(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
