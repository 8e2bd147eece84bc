#include "cellprompt/cli.hpp"

int main(int argc, char** argv) { return cellprompt::run_cli(argc, argv); }
