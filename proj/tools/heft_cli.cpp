#include "heft/cli.hpp"

int main(int argc, char** argv) { return heft::cli_dispatch(argc, argv); }
