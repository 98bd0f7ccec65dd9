#include <iostream>

#include "epanet/cli.hpp"

int main(int argc, char** argv) { return epanet::cli::run(argc, argv, std::cout, std::cerr); }
