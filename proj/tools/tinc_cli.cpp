#include "tinc/cli.hpp"

int main(int argc, char** argv) { return tinc::cli::run(argc, argv); }
