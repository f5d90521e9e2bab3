#include "kappa_sphere/cli.hpp"

int main(int argc, char** argv) { return kappa_sphere::run_cli(argc, argv); }
