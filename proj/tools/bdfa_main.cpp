#include "bdfa/cli.hpp"

int main(int argc, char** argv) { return bdfa::cli_dispatch(argc, argv); }
