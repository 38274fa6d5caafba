#include <iostream>
#include <string>
#include <vector>

#include "mktod/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return mktod::cli::dispatch(args, std::cin, std::cout, std::cerr);
}
