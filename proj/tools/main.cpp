#include "rae_cli.hpp"

int main(int argc, char** argv) { return rae::cli::run_cli(argc, argv); }
