#pragma once

// End-to-end synthetic localization: correlation -> iterative flow ->
// weighted alignment, evaluated against the scene's known pose.

#include <vector>

#include "cvloc/evalkit.hpp"
#include "cvloc/flow.hpp"
#include "cvloc/pose_solver.hpp"
#include "cvloc/synth.hpp"

namespace cvloc {

struct PipelineConfig {
  std::size_t iters = kDefaultFlowIterations;
  std::size_t levels = kDefaultPyramidLevels;
  double temperature = 1.0;
};

inline LocalizationResult localize_scene(const SceneSample& scene, const BevGrid& grid,
                                         const PipelineConfig& pc = {}) {
  const FlowTrace trace = estimate_flow(scene.f_bev, scene.f_sat, ArgmaxOperator{pc.temperature},
                                        pc.iters, scene.visibility, pc.levels);
  return solve_pose(flow_to_matches(trace.final(), grid), grid.anchor, grid.meters_per_pixel);
}

struct BenchTrial {
  Se2Pose gt;
  LocalizationResult pred;
  ErrorRecord error;
};

struct BenchResult {
  std::vector<BenchTrial> trials;
  MetricsTable table;
};

/// Runs `trials` seeded scenes. Errors are reported in units of
/// `unit_per_px` (cfg.mpp for meters, 1.0 for pixels).
inline BenchResult run_synth_bench(const SynthConfig& cfg, std::size_t trials, double unit_per_px,
                                   const PipelineConfig& pc = {},
                                   const RecallThresholds& thresholds = {}) {
  if (trials == 0) throw Error("synth-bench: trials must be >= 1");
  const BevGrid grid = synth_grid(cfg);
  BenchResult res;
  std::vector<ErrorRecord> records;
  for (std::size_t k = 0; k < trials; ++k) {
    SplitMix64 rng = trial_rng(cfg.seed, k);
    const SceneSample scene = gen_scene(cfg, grid, rng);
    BenchTrial t{scene.gt, localize_scene(scene, grid, pc), {}};
    t.error = localization_errors(t.pred.pose, t.gt, heading_deg(t.gt), grid.anchor, unit_per_px,
                                  std::to_string(k));
    records.push_back(t.error);
    res.trials.push_back(std::move(t));
  }
  res.table = aggregate(records, thresholds);
  return res;
}

}  // namespace cvloc
