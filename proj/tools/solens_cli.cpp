#include <iostream>

#include "solens/cli.hpp"

int main(int argc, char** argv) { return solens::dispatch(argc, argv, std::cout, std::cerr); }
