#pragma once

#include "cvloc/correlation.hpp"
#include "cvloc/error.hpp"
#include "cvloc/evalkit.hpp"
#include "cvloc/feature_io.hpp"
#include "cvloc/flow.hpp"
#include "cvloc/flow_field.hpp"
#include "cvloc/geometry.hpp"
#include "cvloc/pipeline.hpp"
#include "cvloc/pose_solver.hpp"
#include "cvloc/refine.hpp"
#include "cvloc/supervision.hpp"
#include "cvloc/synth.hpp"
#include "cvloc/tensor.hpp"
#include "cvloc/weights.hpp"
