#include "fvla/cli.hpp"

int main(int argc, char** argv) { return fvla::cli_main(argc, argv); }
