#include <iostream>

#include "infosteer_tools/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return infosteer::cli::run(args, std::cout, std::cerr);
}
