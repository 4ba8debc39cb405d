// Convenience header pulling in the whole library.
#pragma once

#include "fcdrn/analysis.hpp"
#include "fcdrn/camvid.hpp"
#include "fcdrn/checkpoint.hpp"
#include "fcdrn/config.hpp"
#include "fcdrn/data.hpp"
#include "fcdrn/metrics.hpp"
#include "fcdrn/model.hpp"
#include "fcdrn/receptive_field.hpp"
#include "fcdrn/train.hpp"
