#include <iostream>

#include "bachprop/cli.hpp"

int main(int argc, char** argv) { return bachprop::cli::run(argc, argv, std::cout, std::cerr); }
