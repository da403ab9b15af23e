#include "mscqg/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return mscqg::run_cli(argc, argv, std::cout, std::cerr); }
