#include "madnet/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return madnet::cli::run_cli(argc, argv, std::cout, std::cerr); }
