#include "cli.hpp"

int main(int argc, char** argv) { return cvloc::cli::run(argc, argv); }
