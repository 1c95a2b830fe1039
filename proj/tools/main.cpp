#include "tetris/cli.hpp"

int main(int argc, char** argv) { return tetris::cli::run(argc, argv); }
