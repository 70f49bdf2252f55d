#pragma once

#include "jumpsmp/bsde.hpp"
#include "jumpsmp/errors.hpp"
#include "jumpsmp/lqsolver.hpp"
#include "jumpsmp/malliavin.hpp"
#include "jumpsmp/model.hpp"
#include "jumpsmp/noise.hpp"
#include "jumpsmp/path_array.hpp"
#include "jumpsmp/regression.hpp"
#include "jumpsmp/simulate.hpp"
#include "jumpsmp/smp.hpp"
#include "jumpsmp/stats.hpp"
