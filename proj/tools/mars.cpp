#include "mars/cli.hpp"

int main(int argc, char** argv) { return mars::run_cli(argc, argv); }
