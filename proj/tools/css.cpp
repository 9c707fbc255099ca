#include "css/cli.hpp"

int main(int argc, char** argv) { return css::run_cli(std::vector<std::string>(argv, argv + argc)); }
