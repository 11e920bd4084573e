// CLI entry point; subcommands are registered in cli_impl.hpp.
#include "cli_impl.hpp"

int main(int argc, char** argv) { return ccgn::cli::run(argc, argv); }
