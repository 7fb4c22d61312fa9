#include "bcat/cli.hpp"

int main(int argc, char** argv) { return bcat::cli::run(argc, argv); }
