#include <iostream>

#include "tstream/cli.hpp"

int main(int argc, char** argv) { return tstream::cli::run_cli(argc, argv, std::cout, std::cerr); }
