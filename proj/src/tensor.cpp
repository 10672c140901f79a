#include "surfseg/tensor.hpp"
