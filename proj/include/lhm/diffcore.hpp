#pragma once

#include "lhm/diffcore/tape.hpp"
#include "lhm/diffcore/plain.hpp"
#include "lhm/diffcore/params.hpp"
#include "lhm/diffcore/random.hpp"
