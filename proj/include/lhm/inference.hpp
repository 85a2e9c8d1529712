#pragma once

#include "lhm/inference/encoder.hpp"
#include "lhm/inference/elbo.hpp"
#include "lhm/inference/train.hpp"
#include "lhm/inference/predict.hpp"
