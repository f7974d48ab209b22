#include "sewkit/cli.hpp"

int main(int argc, char** argv) { return sewkit::cli::run(argc, argv); }
