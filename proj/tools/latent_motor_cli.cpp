#include "latent_motor/cli.hpp"

int main(int argc, char** argv) { return latent_motor::cli_dispatch(argc, argv); }
