#pragma once

// Umbrella header: the whole library.

#include "dfd/errors.hpp"
#include "dfd/rng.hpp"
#include "dfd/tensor.hpp"
#include "dfd/serialize.hpp"
#include "dfd/autograd.hpp"
#include "dfd/nn.hpp"
#include "dfd/image.hpp"
#include "dfd/degradation.hpp"
#include "dfd/features.hpp"
#include "dfd/dictionary.hpp"
#include "dfd/dftcore.hpp"
#include "dfd/restorer.hpp"
#include "dfd/objectives.hpp"
#include "dfd/synth.hpp"
#include "dfd/harness.hpp"
