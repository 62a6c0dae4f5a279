#include "cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return vibo::cli::run(argc, argv, std::cout, std::cerr); }
