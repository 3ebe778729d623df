#pragma once

#include "realcustom/error.hpp"
#include "realcustom/rng.hpp"
#include "realcustom/tensor.hpp"
#include "realcustom/nn.hpp"
#include "realcustom/config.hpp"
#include "realcustom/vocabulary.hpp"
#include "realcustom/mask_resize.hpp"
#include "realcustom/backbone.hpp"
#include "realcustom/projector.hpp"
#include "realcustom/model.hpp"
#include "realcustom/curriculum.hpp"
#include "realcustom/diffusion.hpp"
#include "realcustom/mask_guidance.hpp"
#include "realcustom/pipeline.hpp"
#include "realcustom/checkpoint.hpp"
#include "realcustom/image_io.hpp"
#include "realcustom/run_config.hpp"
#include "realcustom/trace_io.hpp"
#include "realcustom/oracles.hpp"
#include "realcustom/oracle_suites.hpp"
