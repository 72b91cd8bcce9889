#include <iostream>

#include "edit/cli.hpp"

int main(int argc, char** argv) { return edit::cli::run(argc, argv, std::cout, std::cerr); }
