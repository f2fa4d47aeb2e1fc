#include "mptf/cli.hpp"

int main(int argc, char** argv) { return mptf::run_cli(argc, argv); }
