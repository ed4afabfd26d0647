#include "cli.hpp"

int main(int argc, char** argv) { return icubert::cli::run(argc, argv); }
