#include "m2d/cli.hpp"

int main(int argc, char** argv) { return m2d::cli::run(argc, argv); }
