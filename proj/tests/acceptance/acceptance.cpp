// Acceptance suite: placeholder, filled in after the unit suites.
#include <iostream>

int main() {
  std::cout << "acceptance suite not yet implemented\n";
  return 1;
}
