#include <iostream>

#include "ldmi/cli.hpp"

int main(int argc, char** argv) { return ldmi::cli_dispatch(argc, argv, std::cout, std::cerr); }
