#include <iostream>

#include "solarfuse/cli.hpp"

int main(int argc, char** argv) { return solarfuse::cli::run(argc, argv, std::cout, std::cerr); }
