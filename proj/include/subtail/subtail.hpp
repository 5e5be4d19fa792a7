#pragma once

#include "subtail/common.hpp"
#include "subtail/dataset.hpp"
#include "subtail/clustering.hpp"
#include "subtail/losses.hpp"
#include "subtail/encoder.hpp"
#include "subtail/trainer.hpp"
#include "subtail/metrics.hpp"
