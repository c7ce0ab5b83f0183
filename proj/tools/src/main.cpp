#include <iostream>

#include "caat/cli.hpp"

int main(int argc, char** argv) {
  return caat::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
