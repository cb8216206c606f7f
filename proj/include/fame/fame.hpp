#pragma once

// Umbrella header for the whole library.
#include "fame/ablation.hpp"
#include "fame/backbone.hpp"
#include "fame/checkpoint.hpp"
#include "fame/config.hpp"
#include "fame/data.hpp"
#include "fame/error.hpp"
#include "fame/fame_layer.hpp"
#include "fame/gradcheck.hpp"
#include "fame/metrics.hpp"
#include "fame/ops.hpp"
#include "fame/params.hpp"
#include "fame/report.hpp"
#include "fame/runtime.hpp"
#include "fame/tensor.hpp"
#include "fame/toy.hpp"
#include "fame/train.hpp"
