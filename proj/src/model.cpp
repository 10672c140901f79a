#include "surfseg/model.hpp"
