#include "smlm/cli.hpp"

int main(int argc, char** argv) { return smlm::cli::run(argc, argv); }
