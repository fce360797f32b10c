#include "advit/cli.hpp"

int main(int argc, char** argv) { return advit::run_cli(argc, argv); }
