#include <iostream>
#include <string>
#include <vector>

#include "mergeforge/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return mergeforge::cli::run_cli(args, std::cout, std::cerr);
}
