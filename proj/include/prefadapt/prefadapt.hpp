#pragma once

#include "prefadapt/dataio.hpp"
#include "prefadapt/embedding.hpp"
#include "prefadapt/errors.hpp"
#include "prefadapt/evalharness.hpp"
#include "prefadapt/prefcore.hpp"
#include "prefadapt/rng.hpp"
#include "prefadapt/service.hpp"
#include "prefadapt/simulator.hpp"
