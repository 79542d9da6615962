#include "cstbir/cli.hpp"

int main(int argc, char** argv) { return cstbir::run_cli(argc, argv); }
