#pragma once

// Umbrella header for the whole library.

#include "scalpel/activation_store.hpp"
#include "scalpel/common.hpp"
#include "scalpel/coupling.hpp"
#include "scalpel/datagen.hpp"
#include "scalpel/gaussian_bridge.hpp"
#include "scalpel/gmm.hpp"
#include "scalpel/mitigation.hpp"
#include "scalpel/pipeline.hpp"
#include "scalpel/probes.hpp"
#include "scalpel/toy_lvlm.hpp"
