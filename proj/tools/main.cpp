#include "mergelab/cli.hpp"

int main(int argc, char** argv) { return mergelab::cli::run(argc, argv); }
