#include "fmdt/cli.hpp"

int main(int argc, char** argv) { return fmdt::cli::run(argc, argv); }
