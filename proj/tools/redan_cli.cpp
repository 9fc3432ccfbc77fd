#include "redan/cli.hpp"

int main(int argc, char** argv) { return redan::run_cli(argc, argv); }
