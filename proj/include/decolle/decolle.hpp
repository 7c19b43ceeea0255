#pragma once

#include "decolle/alloc_tracking.hpp"
#include "decolle/checkpoint.hpp"
#include "decolle/config.hpp"
#include "decolle/dynamics.hpp"
#include "decolle/errors.hpp"
#include "decolle/events.hpp"
#include "decolle/learning.hpp"
#include "decolle/metrics.hpp"
#include "decolle/network.hpp"
#include "decolle/oracle.hpp"
#include "decolle/synthetic.hpp"
#include "decolle/tensor.hpp"
#include "decolle/trainer.hpp"
