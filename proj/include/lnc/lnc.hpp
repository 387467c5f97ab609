#pragma once

// Umbrella header for the lnc library.

#include "lnc/common.hpp"
#include "lnc/io.hpp"
#include "lnc/dataset.hpp"
#include "lnc/distance.hpp"
#include "lnc/kmeans.hpp"
#include "lnc/pq.hpp"
#include "lnc/opq.hpp"
#include "lnc/codec.hpp"
#include "lnc/graph.hpp"
#include "lnc/refine.hpp"
#include "lnc/index.hpp"
#include "lnc/imi.hpp"
#include "lnc/bench.hpp"
