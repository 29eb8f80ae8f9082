#include "lgar/cli.hpp"

int main(int argc, char** argv) { return lgar::cli::run_cli(argc, argv); }
