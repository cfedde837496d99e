#include <klrisk/cli.hpp>

int main(int argc, char** argv) { return klrisk::cli::run(argc, argv); }
