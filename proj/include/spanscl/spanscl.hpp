#pragma once

#include "spanscl/rng.hpp"
#include "spanscl/kv_config.hpp"
#include "spanscl/io.hpp"
#include "spanscl/corpus.hpp"
#include "spanscl/autodiff.hpp"
#include "spanscl/encoder.hpp"
#include "spanscl/spans.hpp"
#include "spanscl/objective.hpp"
#include "spanscl/metrics.hpp"
#include "spanscl/optim.hpp"
#include "spanscl/model.hpp"
#include "spanscl/harness.hpp"
#include "spanscl/analysis.hpp"
#include "spanscl/plot.hpp"
