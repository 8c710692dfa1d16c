#include <iostream>

#include "elat/cli.hpp"

int main(int argc, char** argv) { return elat::cli::run(argc, argv, std::cout, std::cerr); }
