#pragma once

#include "streamacc/common.hpp"
#include "streamacc/tokengrid.hpp"
#include "streamacc/synthdata.hpp"
#include "streamacc/streamalign.hpp"
#include "streamacc/kernels.hpp"
#include "streamacc/tinyformer.hpp"
#include "streamacc/checkpoint.hpp"
#include "streamacc/trainer.hpp"
#include "streamacc/decode.hpp"
#include "streamacc/rtsched.hpp"
#include "streamacc/evalkit.hpp"
