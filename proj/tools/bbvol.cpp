#include "bbvol/cli.hpp"

int main(int argc, char** argv) { return bbvol::cli::run(argc, argv); }
