#pragma once

#include "mambastyle/checkpoint.hpp"
#include "mambastyle/config.hpp"
#include "mambastyle/cost.hpp"
#include "mambastyle/encoder.hpp"
#include "mambastyle/fuser.hpp"
#include "mambastyle/image_io.hpp"
#include "mambastyle/losses.hpp"
#include "mambastyle/metrics.hpp"
#include "mambastyle/optim.hpp"
#include "mambastyle/pipeline.hpp"
#include "mambastyle/ssm.hpp"
#include "mambastyle/stylegen.hpp"
#include "mambastyle/training.hpp"
#include "mambastyle/vssm.hpp"
