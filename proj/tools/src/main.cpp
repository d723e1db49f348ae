#include <iostream>

#include "kvfold_cli/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return kvfold::cli::main_entry(args, std::cout, std::cerr);
}
