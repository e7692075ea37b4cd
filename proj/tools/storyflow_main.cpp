#include <cstdio>

int main() {
    std::puts("storyflow: no subcommand");
    return 2;
}
