#include "fcdrn/cli.hpp"

int main(int argc, char** argv) { return fcdrn::cli::run(argc, argv); }
