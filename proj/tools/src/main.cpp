#include <iostream>

#include "hulm_cli/cli.hpp"

int main(int argc, char** argv) { return hulm::cli::run(argc, argv, std::cout, std::cerr); }
