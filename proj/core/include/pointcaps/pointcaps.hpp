#pragma once

// Convenience umbrella for library consumers.

#include "pointcaps/checkpoint.hpp"
#include "pointcaps/data.hpp"
#include "pointcaps/errors.hpp"
#include "pointcaps/layers.hpp"
#include "pointcaps/model.hpp"
#include "pointcaps/ops.hpp"
#include "pointcaps/optimizer.hpp"
#include "pointcaps/routing.hpp"
#include "pointcaps/tensor.hpp"
#include "pointcaps/train.hpp"
#include "pointcaps/verify.hpp"
#include "pointcaps/version.hpp"
