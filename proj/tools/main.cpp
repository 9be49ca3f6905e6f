#include "ssmlab/model.hpp"

int main(int, char**) { return 0; }
