#include "mfstop/cli.hpp"

int main(int argc, char** argv) { return mfstop::cli::run_cli(argc, argv); }
