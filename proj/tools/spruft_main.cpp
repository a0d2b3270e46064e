#include "spruft/experiment.hpp"

int main(int argc, char** argv) { return spruft::run_cli(argc, argv); }
