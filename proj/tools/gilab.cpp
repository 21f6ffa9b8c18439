#include "gilab/cli.hpp"

int main(int argc, char** argv) { return gilab::cli::main_entry(argc, argv); }
