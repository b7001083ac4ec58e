#include "tdlm/cli.hpp"

int main(int argc, char** argv) { return tdlm::cli::run(argc, argv); }
