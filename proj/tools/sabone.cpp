#include "sabone/cli.hpp"

int main(int argc, char** argv) { return sabone::cli::run(argc, argv); }
