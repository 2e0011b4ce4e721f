#include "recurformer/cli.hpp"

int main(int argc, char** argv) { return rfm::run_cli(argc, argv); }
