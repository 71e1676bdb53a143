#include "pcd/cli.hpp"

int main(int argc, char** argv) { return pcd::cli_main(argc, argv); }
