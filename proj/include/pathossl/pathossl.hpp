#pragma once

// Umbrella header for the whole library.

#include "augment.hpp"
#include "checkpoint.hpp"
#include "color.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "net.hpp"
#include "pairs.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "slide.hpp"
#include "slide_io.hpp"
#include "trainer.hpp"
