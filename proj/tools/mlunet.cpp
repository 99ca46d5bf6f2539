#include "mlunet/cli.hpp"

int main(int argc, char** argv) { return mlunet::run_command(argc, argv); }
