#pragma once

#include "fpcnet/tensor.hpp"
#include "fpcnet/rng.hpp"
#include "fpcnet/parallel.hpp"
#include "fpcnet/layers.hpp"
#include "fpcnet/network.hpp"
#include "fpcnet/models.hpp"
#include "fpcnet/ensemble.hpp"
#include "fpcnet/stats.hpp"
#include "fpcnet/equivalence.hpp"
#include "fpcnet/trainer.hpp"
#include "fpcnet/image_io.hpp"
#include "fpcnet/color_constancy.hpp"
#include "fpcnet/dehazing.hpp"
#include "fpcnet/inspect.hpp"
#include "fpcnet/svg.hpp"
#include "fpcnet/scenes.hpp"
