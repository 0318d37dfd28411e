#include "lopa/composer.hpp"
int main() { return 0; }
