// Builds (or resumes) the cached reference run used by the acceptance suite.
#include <iostream>

#include "e2e_pipeline.hpp"

int main(int argc, char** argv) {
    const auto root = argc > 1 ? std::filesystem::path(argv[1]) : sabone::e2e::default_root("e2e_run");
    auto p = sabone::e2e::ensure_pipeline(root);
    std::cout << p.root.string() << "\n";
}
