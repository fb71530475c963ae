#include "regseg/cli.hpp"

int main(int argc, char** argv) { return regseg::run_cli(argc, argv); }
