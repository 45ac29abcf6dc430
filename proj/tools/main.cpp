#include "zsq/harness.hpp"

int main(int argc, char** argv) { return zsq::harness::run_cli(argc, argv); }
