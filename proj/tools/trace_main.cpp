#include "trace/cli.hpp"

int main(int argc, char** argv) { return trace::cli::main(argc, argv); }
