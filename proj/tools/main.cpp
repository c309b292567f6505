#include "fold2seq/cli.hpp"

int main(int argc, char** argv) { return fold2seq::cli::run(argc, argv); }
