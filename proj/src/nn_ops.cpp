#include "surfseg/nn_ops.hpp"
