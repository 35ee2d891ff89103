#pragma once

#include "deref/errors.hpp"
#include "deref/tensor.hpp"
#include "deref/datasets.hpp"
#include "deref/encoders.hpp"
#include "deref/decoupling.hpp"
#include "deref/reorganize.hpp"
#include "deref/moe.hpp"
#include "deref/survival.hpp"
#include "deref/eval.hpp"
#include "deref/model.hpp"
#include "deref/train.hpp"
#include "deref/io.hpp"
#include "deref/plot.hpp"
