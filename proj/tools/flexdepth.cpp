#include "flexdepth/cli.hpp"

int main(int argc, char** argv) { return flexdepth::cli::run(argc, argv); }
