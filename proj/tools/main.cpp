#include "downscale/cli.hpp"

int main(int argc, char** argv) { return downscale::run_cli(argc, argv); }
