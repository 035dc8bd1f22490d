#include <iostream>

#include "invcert/commands.hpp"

int main(int argc, char** argv) { return invcert::cli::run(argc, argv, std::cout, std::cerr); }
