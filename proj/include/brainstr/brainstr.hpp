#pragma once

// Umbrella header.

#include "errors.hpp"
#include "log.hpp"
#include "autodiff.hpp"
#include "nn.hpp"
#include "synthgen.hpp"
#include "segfc.hpp"
#include "app.hpp"
#include "structgen.hpp"
#include "encoder.hpp"
#include "objective.hpp"
#include "model.hpp"
#include "trainer.hpp"
#include "gradcheck.hpp"
#include "io.hpp"
#include "explain.hpp"
#include "baseline.hpp"
