#pragma once

#include "owssl/adaptation.hpp"
#include "owssl/backbone.hpp"
#include "owssl/collapse.hpp"
#include "owssl/data.hpp"
#include "owssl/errors.hpp"
#include "owssl/experiment.hpp"
#include "owssl/metrics.hpp"
#include "owssl/model.hpp"
#include "owssl/regularizer.hpp"
#include "owssl/rng.hpp"
#include "owssl/scenario.hpp"
