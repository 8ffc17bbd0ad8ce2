#pragma once

#include "stmp/core.hpp"
#include "stmp/normal.hpp"
#include "stmp/quadrature.hpp"
#include "stmp/operators.hpp"
#include "stmp/priors.hpp"
#include "stmp/denoisers.hpp"
#include "stmp/msgpass.hpp"
#include "stmp/quantizer.hpp"
#include "stmp/state_evolution.hpp"
#include "stmp/score_matching.hpp"
#include "stmp/external.hpp"
#include "stmp/io.hpp"
#include "stmp/harness.hpp"
