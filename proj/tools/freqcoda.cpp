#include "freqcoda/cli.hpp"

int main(int argc, char** argv) { return freqcoda::cli::run(argc, argv); }
