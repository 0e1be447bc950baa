#include "cli_app.hpp"

int main(int argc, char** argv) { return scaffold::cli::run_cli(argc, argv); }
