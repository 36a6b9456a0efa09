#include "cerd/cli.hpp"

int main(int argc, char** argv) { return cerd::cli::run(argc, argv); }
