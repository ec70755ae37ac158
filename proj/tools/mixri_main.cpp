#include <cstdio>

int main() {
  std::puts("mixri CLI placeholder");
  return 0;
}
