#include "stylebank/cli.hpp"

int main(int argc, char** argv) { return stylebank::cli::run_cli(argc, argv); }
