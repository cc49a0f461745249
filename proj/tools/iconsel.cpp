#include "iconsel/cli.hpp"

int main(int argc, char** argv) { return iconsel::cli::run(argc, argv); }
