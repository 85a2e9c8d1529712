#include "lhm/cli.hpp"

int main(int argc, char** argv) { return lhm::cli::dispatch(argc, argv); }
