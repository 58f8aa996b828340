#pragma once

#include "hetspec/error.hpp"
#include "hetspec/tensor.hpp"
#include "hetspec/tree.hpp"
#include "hetspec/sparse_attention.hpp"
#include "hetspec/model.hpp"
#include "hetspec/speculative.hpp"
#include "hetspec/runtime.hpp"
#include "hetspec/tuner.hpp"
#include "hetspec/io.hpp"
#include "hetspec/serialize.hpp"
