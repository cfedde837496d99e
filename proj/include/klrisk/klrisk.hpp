#pragma once

#include "errors.hpp"
#include "linalg.hpp"
#include "random.hpp"
#include "parallel.hpp"
#include "expfam.hpp"
#include "predictors.hpp"
#include "lasso.hpp"
#include "jacobian.hpp"
#include "estimators.hpp"
#include "oracles.hpp"
#include "harness.hpp"
