#include "deepbirads/cli.hpp"

int main(int argc, char** argv) { return deepbirads::run_cli(argc, argv); }
