#include "mrgmm/cli.hpp"

int main(int argc, char** argv) { return mrgmm::cli::main_entry(argc, argv); }
