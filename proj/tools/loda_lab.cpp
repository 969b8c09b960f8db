#include "loda/cli.hpp"

int main(int argc, char** argv) { return loda::cli::run(argc, argv); }
