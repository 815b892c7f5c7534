#include <iostream>

#include "t2tbio/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return t2tbio::run(args, std::cout, std::cerr);
}
