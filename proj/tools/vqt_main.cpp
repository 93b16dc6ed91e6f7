#include "vqt/cli.hpp"

int main(int argc, char** argv) { return vqt::cli::run(argc, argv); }
