#pragma once

#include "controls.hpp"
#include "diagnostics.hpp"
#include "encoders.hpp"
#include "error.hpp"
#include "estimators.hpp"
#include "io.hpp"
#include "linear_gaussian.hpp"
#include "penalty.hpp"
#include "psd.hpp"
#include "rng.hpp"
#include "stats.hpp"
#include "trainer.hpp"
