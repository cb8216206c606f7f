#include "cli_app.hpp"

int main(int argc, char** argv) {
    fame::tune_allocator();
    std::vector<std::string> args(argv + 1, argv + argc);
    return fame::cli::run(args);
}
