#include "commands.hpp"

int main(int argc, char** argv) { return mambastyle::cli::run(argc, argv); }
