#include "maskany/cli.hpp"

int main(int argc, char** argv) { return maskany::run_cli(argc, argv); }
