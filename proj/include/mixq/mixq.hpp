#pragma once

#include "error.hpp"
#include "experiments.hpp"
#include "gemm.hpp"
#include "memory.hpp"
#include "outlier_set.hpp"
#include "outliers.hpp"
#include "qt8.hpp"
#include "quant.hpp"
#include "stack_io.hpp"
#include "tensor.hpp"
#include "transformer.hpp"
